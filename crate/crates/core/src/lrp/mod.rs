//! Layer-wise relevance propagation for the channel-independent model and the
//! marker-level phenotyping built on top of it.
//!
//! Propagation runs on a [`FoldedCim`]: batch norm is folded into the
//! preceding convolution so every layer is an affine map followed by ReLU.
//! Squeeze-excitation gates are treated as constants, so relevance flows only
//! through the gated depthwise path and the residual connection, and never
//! crosses from one marker's feature block into another's.

mod fold;
mod phenotype;

pub use fold::{BlockTrace, FoldedBlock, FoldedCim, FoldedHead, Trace};
pub use phenotype::{
    aggregate_channel_relevance, assign_phenotype, module_score, phenotype_csv, separability_report,
    AggregateConfig, GroupSeparability, PhenotypeAssignment,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CimError, Result};
use crate::tensor::Tensor;

/// Scalar that relevance is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Target {
    /// Sum of pooled embedding activations.
    EmbeddingSum,
    /// A single pooled embedding unit.
    Unit(usize),
    /// A classifier logit; requires a classifier head.
    Logit(usize),
}

/// Rule applied to the stem convolution, which sees raw pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemRule {
    /// Box rule with input bounds `[low, high]`.
    Box,
    Epsilon,
}

/// Redistribution through global average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRule {
    /// Split in proportion to each position's activation.
    Proportional,
    /// Split evenly over all positions.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrpConfig {
    pub epsilon: f64,
    /// Weight of the positive part in the depthwise γ-rule; 0 gives plain ε.
    pub gamma: f64,
    pub stem_rule: StemRule,
    pub box_low: f64,
    pub box_high: f64,
    pub pool_rule: PoolRule,
    pub target: Target,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            gamma: 0.25,
            stem_rule: StemRule::Box,
            box_low: 0.0,
            box_high: 1.0,
            pool_rule: PoolRule::Proportional,
            target: Target::EmbeddingSum,
        }
    }
}

impl LrpConfig {
    /// ε-rule everywhere, which conserves relevance up to what biases absorb.
    pub fn epsilon_only() -> Self {
        Self {
            gamma: 0.0,
            stem_rule: StemRule::Epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return config_err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return config_err(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.box_low < self.box_high) {
            return config_err(format!("box bounds [{}, {}] are empty", self.box_low, self.box_high));
        }
        Ok(())
    }
}

/// Relevance of one patch over its input pixels.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    /// `[C, H, W]`.
    pub values: Tensor,
    /// Value of the explained scalar.
    pub target_value: f64,
    /// Total relevance after each propagation step, from the output inwards.
    pub layer_sums: Vec<(String, f64)>,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.values.data().iter().sum()
    }
}

#[inline]
fn stab(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Explain one `[C, H, W]` patch.
pub fn explain(model: &FoldedCim, patch: &Tensor, cfg: &LrpConfig) -> Result<RelevanceMap> {
    cfg.validate()?;
    let &[c, h, w] = patch.shape() else {
        return Err(CimError::Dimension(format!("expected a [C, H, W] patch, got {:?}", patch.shape())));
    };
    if c != model.markers {
        return Err(CimError::Dimension(format!("patch has {c} markers, model expects {}", model.markers)));
    }
    let trace = model.forward(patch.data(), h, w)?;
    let values = propagate(model, &trace, cfg)?;
    let (target_value, layer_sums) = values.1;
    Ok(RelevanceMap {
        values: Tensor::new(&[c, h, w], values.0)?,
        target_value,
        layer_sums,
    })
}

/// Explain every patch of an `[N, C, H, W]` batch in parallel.
pub fn explain_batch(model: &FoldedCim, patches: &Tensor, cfg: &LrpConfig) -> Result<Vec<RelevanceMap>> {
    let &[n, c, h, w] = patches.shape() else {
        return Err(CimError::Dimension(format!("expected [N, C, H, W] patches, got {:?}", patches.shape())));
    };
    let per = c * h * w;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let patch = Tensor::new(&[c, h, w], patches.data()[i * per..(i + 1) * per].to_vec())?;
            explain(model, &patch, cfg)
        })
        .collect()
}

/// Label-free result for one patch.
#[derive(Debug, Clone)]
pub struct PatchPhenotype {
    pub channel_scores: Vec<f64>,
    pub assignment: PhenotypeAssignment,
    /// Total input relevance divided by the explained value.
    pub conservation: f64,
}

/// Explain, aggregate and assign every patch of an `[N, C, H, W]` batch in
/// parallel, without keeping the relevance maps.
pub fn phenotype_patches(
    model: &FoldedCim,
    patches: &Tensor,
    modules: &[crate::data::MarkerModule],
    lrp: &LrpConfig,
    agg: &AggregateConfig,
) -> Result<Vec<PatchPhenotype>> {
    lrp.validate()?;
    agg.validate()?;
    let &[n, c, h, w] = patches.shape() else {
        return Err(CimError::Dimension(format!("expected [N, C, H, W] patches, got {:?}", patches.shape())));
    };
    let per = c * h * w;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let patch = Tensor::new(&[c, h, w], patches.data()[i * per..(i + 1) * per].to_vec())?;
            let map = explain(model, &patch, lrp)?;
            let channel_scores = aggregate_channel_relevance(&map.values, &patch, agg)?;
            let assignment = assign_phenotype(&channel_scores, modules, agg)?;
            let conservation = if map.target_value != 0.0 { map.total() / map.target_value } else { 0.0 };
            Ok(PatchPhenotype {
                channel_scores,
                assignment,
                conservation,
            })
        })
        .collect()
}

type Sums = (f64, Vec<(String, f64)>);

fn target_relevance(model: &FoldedCim, trace: &Trace, cfg: &LrpConfig) -> Result<(f64, Vec<f64>)> {
    let pooled = &trace.pooled;
    let d = pooled.len();
    match cfg.target {
        Target::EmbeddingSum => Ok((pooled.iter().sum(), pooled.clone())),
        Target::Unit(j) => {
            if j >= d {
                return config_err(format!("unit {j} out of range for {d} pooled features"));
            }
            let mut r = vec![0.0; d];
            r[j] = pooled[j];
            Ok((pooled[j], r))
        }
        Target::Logit(class) => {
            let (hidden, logits) = model.head_forward(pooled)?;
            let head = model.head.as_ref().expect("head_forward checked the head");
            if class >= head.classes {
                return config_err(format!("class {class} out of range for {} classes", head.classes));
            }
            let hid = head.hidden;
            let act: Vec<f64> = hidden.iter().map(|v| v.max(0.0)).collect();
            let s = logits[class] / stab(logits[class], cfg.epsilon);
            let r_hidden: Vec<f64> = (0..hid)
                .map(|j| act[j] * head.fc2_w[class * hid + j] * s)
                .collect();
            let mut r = vec![0.0; d];
            for j in 0..hid {
                if r_hidden[j] == 0.0 {
                    continue;
                }
                let s = r_hidden[j] / stab(hidden[j], cfg.epsilon);
                for i in 0..d {
                    r[i] += pooled[i] * head.fc1_w[j * d + i] * s;
                }
            }
            Ok((logits[class], r))
        }
    }
}

fn propagate(model: &FoldedCim, trace: &Trace, cfg: &LrpConfig) -> Result<(Vec<f64>, Sums)> {
    let (k, d) = (model.width, model.feature_dim());
    let (h, w) = (trace.h, trace.w);
    let hw = h * w;
    let eps = cfg.epsilon;
    let mut sums = Vec::new();

    let (target_value, r_pooled) = target_relevance(model, trace, cfg)?;
    sums.push(("target".to_string(), target_value));
    sums.push(("pooled".to_string(), r_pooled.iter().sum()));

    let last = trace.blocks.last().map_or_else(
        || trace.stem_pre.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(),
        |b| b.output.clone(),
    );
    let mut r = vec![0.0; d * hw];
    for ch in 0..d {
        let plane = &last[ch * hw..(ch + 1) * hw];
        let out = &mut r[ch * hw..(ch + 1) * hw];
        match cfg.pool_rule {
            PoolRule::Uniform => out.fill(r_pooled[ch] / hw as f64),
            PoolRule::Proportional => {
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let s = r_pooled[ch] / stab(mean, eps) / hw as f64;
                for (o, a) in out.iter_mut().zip(plane) {
                    *o = a * s;
                }
            }
        }
    }
    sums.push(("pool".to_string(), r.iter().sum()));

    for (b, (blk, tr)) in model.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        // Final ReLU passes relevance unchanged; split the residual sum.
        let mut r_pw = vec![0.0; d * hw];
        let mut r_in = vec![0.0; d * hw];
        for i in 0..d * hw {
            if r[i] == 0.0 {
                continue;
            }
            let s = r[i] / stab(tr.sum[i], eps);
            r_pw[i] = tr.pw_pre[i] * s;
            r_in[i] = tr.input[i] * s;
        }
        // Grouped pointwise layer, ε-rule.
        let mut r_gated = vec![0.0; d * hw];
        for o in 0..d {
            let base = (o / k) * k;
            for p in 0..hw {
                let rv = r_pw[o * hw + p];
                if rv == 0.0 {
                    continue;
                }
                let s = rv / stab(tr.pw_pre[o * hw + p], eps);
                for j in 0..k {
                    let idx = (base + j) * hw + p;
                    r_gated[idx] += tr.gated[idx] * blk.pw_w[o * k + j] * s;
                }
            }
        }
        sums.push((format!("blocks.{b}.pw"), r_gated.iter().sum::<f64>() + r_in.iter().sum::<f64>()));
        // Gates are constants and the depthwise ReLU passes relevance through,
        // so `r_gated` is the relevance of the depthwise pre-activations. The
        // γ-rule recomputes them with boosted positive weights.
        let wg: Vec<f64> = blk.dw_w.iter().map(|&v| v + cfg.gamma * v.max(0.0)).collect();
        let bg: Vec<f64> = blk.dw_b.iter().map(|&v| v + cfg.gamma * v.max(0.0)).collect();
        let zg = fold::depthwise(&tr.input, &wg, &bg, d, h, w);
        let mut s = vec![0.0; d * hw];
        for i in 0..d * hw {
            if r_gated[i] != 0.0 {
                s[i] = r_gated[i] / stab(zg[i], eps);
            }
        }
        // Transposed depthwise convolution of `s`, then multiply by the input.
        for ch in 0..d {
            let kern = &wg[ch * 9..(ch + 1) * 9];
            for y in 0..h {
                for x in 0..w {
                    let a = tr.input[ch * hw + y * w + x];
                    if a == 0.0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let oy = y as isize - (ky as isize - 1);
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ox = x as isize - (kx as isize - 1);
                            if ox < 0 || ox >= w as isize {
                                continue;
                            }
                            acc += kern[ky * 3 + kx] * s[ch * hw + oy as usize * w + ox as usize];
                        }
                    }
                    r_in[ch * hw + y * w + x] += a * acc;
                }
            }
        }
        sums.push((format!("blocks.{b}.input"), r_in.iter().sum()));
        r = r_in;
    }

    // Stem: one pixel feeds each feature channel.
    let c = model.markers;
    let mut out = vec![0.0; c * hw];
    for ch in 0..d {
        let m = ch / k;
        let wv = model.stem_w[ch];
        for p in 0..hw {
            let rv = r[ch * hw + p];
            if rv == 0.0 {
                continue;
            }
            let x = trace.input[m * hw + p];
            let ratio = match cfg.stem_rule {
                StemRule::Epsilon => x * wv / stab(trace.stem_pre[ch * hw + p], eps),
                StemRule::Box => {
                    let z = x * wv - cfg.box_low * wv.max(0.0) - cfg.box_high * wv.min(0.0);
                    z / stab(z, eps)
                }
            };
            out[m * hw + p] += ratio * rv;
        }
    }
    sums.push(("input".to_string(), out.iter().sum()));
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(CimError::NonFinite(format!("relevance contains {bad}")));
    }
    Ok((out, (target_value, sums)))
}
