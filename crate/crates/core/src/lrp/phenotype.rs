//! Channel relevance aggregation, module scoring and phenotype assignment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{percentile, MarkerModule};
use crate::error::{config_err, dim_err, CimError, Result};
use crate::eval::wasserstein_1d;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    /// Entries below this fraction of the patch's largest magnitude are zeroed.
    pub noise_fraction: f64,
    /// Percentile of the positive relevance used as the clipping ceiling.
    pub clip_percentile: f64,
    /// How many of a module's best-scoring markers are averaged.
    pub top_k: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            noise_fraction: 0.01,
            clip_percentile: 99.0,
            top_k: 3,
        }
    }
}

impl AggregateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return config_err(format!("noise fraction {} outside [0, 1)", self.noise_fraction));
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return config_err(format!("clip percentile {} outside (0, 100]", self.clip_percentile));
        }
        if self.top_k == 0 {
            return config_err("top_k must be at least 1");
        }
        Ok(())
    }
}

/// Per-marker score of one patch: mean clipped positive relevance of the
/// channel times the channel's mean intensity.
pub fn aggregate_channel_relevance(relevance: &Tensor, patch: &Tensor, cfg: &AggregateConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if relevance.shape() != patch.shape() || relevance.rank() != 3 {
        return dim_err(format!(
            "relevance {:?} and patch {:?} must be matching [C, H, W]",
            relevance.shape(),
            patch.shape()
        ));
    }
    if !relevance.is_finite() {
        return Err(CimError::NonFinite("relevance map is not finite".into()));
    }
    let c = relevance.shape()[0];
    let hw = relevance.len() / c;
    let floor = cfg.noise_fraction * relevance.max_abs();
    let kept: Vec<f64> = relevance
        .data()
        .iter()
        .map(|&r| if r.abs() < floor || r <= 0.0 { 0.0 } else { r })
        .collect();
    let positive: Vec<f64> = kept.iter().copied().filter(|&r| r > 0.0).collect();
    if positive.is_empty() {
        return Ok(vec![0.0; c]);
    }
    let ceiling = percentile(&positive, cfg.clip_percentile)?;
    let mut scores = Vec::with_capacity(c);
    for ch in 0..c {
        let rel = &kept[ch * hw..(ch + 1) * hw];
        let mean_rel = rel.iter().map(|&r| r.min(ceiling) / ceiling).sum::<f64>() / hw as f64;
        let mean_int = patch.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        scores.push(mean_rel * mean_int);
    }
    Ok(scores)
}

/// Mean of the `top_k` largest member scores, or of all members if fewer.
pub fn module_score(channel_scores: &[f64], module: &MarkerModule, top_k: usize) -> Result<f64> {
    if let Some(&bad) = module.members.iter().find(|&&m| m >= channel_scores.len()) {
        return config_err(format!("module {}: marker {bad} has no score", module.name));
    }
    if module.members.is_empty() || top_k == 0 {
        return Err(CimError::Empty(format!("module {} has nothing to score", module.name)));
    }
    let mut vals: Vec<f64> = module.members.iter().map(|&m| channel_scores[m]).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let n = top_k.min(vals.len());
    Ok(vals[..n].iter().sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeAssignment {
    /// One score per module, in declaration order.
    pub scores: Vec<f64>,
    pub phenotype: usize,
    /// Best minus second-best score; the score itself with a single module.
    pub margin: f64,
    /// Another module reached the same best score.
    pub tie: bool,
}

/// Highest-scoring module; ties go to the first declared.
pub fn assign_phenotype(
    channel_scores: &[f64],
    modules: &[MarkerModule],
    cfg: &AggregateConfig,
) -> Result<PhenotypeAssignment> {
    if modules.is_empty() {
        return Err(CimError::Empty("no modules to assign".into()));
    }
    let scores = modules
        .iter()
        .map(|m| module_score(channel_scores, m, cfg.top_k))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let second = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &s)| s)
        .max_by(f64::total_cmp);
    let (margin, tie) = match second {
        Some(s) => (scores[best] - s, s == scores[best]),
        None => (scores[best], false),
    };
    Ok(PhenotypeAssignment {
        scores,
        phenotype: best,
        margin,
        tie,
    })
}

/// `patch_id,x,y,<module scores>,phenotype,margin,tie_flag`.
pub fn phenotype_csv(
    assignments: &[PhenotypeAssignment],
    positions: &[(usize, usize)],
    modules: &[MarkerModule],
) -> Result<String> {
    if assignments.len() != positions.len() {
        return dim_err(format!(
            "{} assignments but {} positions",
            assignments.len(),
            positions.len()
        ));
    }
    let mut out = String::from("patch_id,x,y");
    for m in modules {
        out.push(',');
        out.push_str(&m.name);
    }
    out.push_str(",phenotype,margin,tie_flag\n");
    for (i, (a, &(x, y))) in assignments.iter().zip(positions).enumerate() {
        if a.scores.len() != modules.len() {
            return dim_err(format!("assignment {i} has {} scores", a.scores.len()));
        }
        write!(out, "{i},{x},{y}").unwrap();
        for s in &a.scores {
            write!(out, ",{s}").unwrap();
        }
        writeln!(out, ",{},{},{}", modules[a.phenotype].name, a.margin, u8::from(a.tie)).unwrap();
    }
    Ok(out)
}

/// Distance between two markers' distributions inside one cell group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSeparability {
    pub group: usize,
    pub cells: usize,
    pub intensity_wd: f64,
    pub relevance_wd: f64,
}

fn max_scaled(values: &[Vec<f64>], a: usize, b: usize, members: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let peak = members
        .iter()
        .flat_map(|&i| [values[i][a].abs(), values[i][b].abs()])
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    (
        members.iter().map(|&i| values[i][a] * scale).collect(),
        members.iter().map(|&i| values[i][b] * scale).collect(),
    )
}

/// For each requested group, the Wasserstein-1 distance between `marker_a`
/// and `marker_b` across its cells, once on mean intensities and once on
/// channel relevance scores. Each representation is divided by its largest
/// magnitude within the group so the two distances share a scale.
pub fn separability_report(
    groups: &[usize],
    intensities: &[Vec<f64>],
    relevance: &[Vec<f64>],
    marker_a: usize,
    marker_b: usize,
    selected: &[usize],
) -> Result<Vec<GroupSeparability>> {
    if intensities.len() != groups.len() || relevance.len() != groups.len() {
        return dim_err(format!(
            "{} groups, {} intensity rows, {} relevance rows",
            groups.len(),
            intensities.len(),
            relevance.len()
        ));
    }
    let width = marker_a.max(marker_b);
    if intensities.iter().chain(relevance).any(|row| row.len() <= width) {
        return config_err(format!("marker {width} missing from some rows"));
    }
    selected
        .iter()
        .map(|&g| {
            let members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
            if members.len() < 2 {
                return Err(CimError::Empty(format!(
                    "group {g} has {} cells, need at least 2",
                    members.len()
                )));
            }
            let (ia, ib) = max_scaled(intensities, marker_a, marker_b, &members);
            let (ra, rb) = max_scaled(relevance, marker_a, marker_b, &members);
            Ok(GroupSeparability {
                group: g,
                cells: members.len(),
                intensity_wd: wasserstein_1d(&ia, &ib)?,
                relevance_wd: wasserstein_1d(&ra, &rb)?,
            })
        })
        .collect()
}
