//! Multiplex datasets: marker panels, phenotype modules, the synthetic
//! generator, preprocessing, splits and on-disk formats.

mod io;
mod synth;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, CimError, Result};
use crate::tensor::Tensor;

pub use io::{
    export_embeddings, load_bundle, load_modules, read_maps, save_bundle, save_modules, sidecar_path, write_maps,
    MAGIC_DATASET, MAGIC_RELEVANCE,
};
pub use synth::{generate_synthetic, patch_position, BleedThrough, PhenotypeSpec, SynthConfig};

/// Ordered marker names; channel `c` of every patch is marker `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarkerPanel {
    markers: Vec<String>,
}

impl MarkerPanel {
    pub fn new(markers: Vec<String>) -> Result<Self> {
        if markers.is_empty() {
            return Err(CimError::Empty("marker panel".into()));
        }
        let mut seen = HashSet::new();
        for m in &markers {
            if !seen.insert(m.as_str()) {
                return config_err(format!("marker {m:?} listed twice"));
            }
        }
        Ok(Self { markers })
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.markers
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.markers
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| CimError::Config(format!("marker {name:?} not in panel")))
    }
}

/// A phenotype and the marker channels characteristic of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerModule {
    pub name: String,
    pub members: Vec<usize>,
}

/// Name-based form of a module as written in JSON files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    pub markers: Vec<String>,
}

impl MarkerModule {
    pub fn new(name: impl Into<String>, members: Vec<usize>, channels: usize) -> Result<Self> {
        let name = name.into();
        if members.is_empty() {
            return Err(CimError::Empty(format!("module {name} has no markers")));
        }
        if let Some(&bad) = members.iter().find(|&&m| m >= channels) {
            return config_err(format!("module {name}: marker index {bad} >= {channels}"));
        }
        Ok(Self { name, members })
    }

    pub fn resolve(spec: &ModuleSpec, panel: &MarkerPanel) -> Result<Self> {
        let members = spec
            .markers
            .iter()
            .map(|m| panel.index_of(m))
            .collect::<Result<Vec<_>>>()?;
        Self::new(spec.name.clone(), members, panel.len())
    }

    pub fn to_spec(&self, panel: &MarkerPanel) -> ModuleSpec {
        ModuleSpec {
            name: self.name.clone(),
            markers: self.members.iter().map(|&m| panel.names()[m].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            c => Err(CimError::Format(format!("unknown split code {c}"))),
        }
    }
}

/// Patches `[N,C,H,W]` with labels, panel, phenotype modules and split codes.
///
/// Label `l` refers to `modules[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub patches: Tensor,
    pub labels: Vec<usize>,
    pub panel: MarkerPanel,
    pub modules: Vec<MarkerModule>,
    pub splits: Vec<Split>,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        let (n, c, ..) = self.patches.dims4()?;
        if c != self.panel.len() {
            return dim_err(format!("{c} channels but {} panel markers", self.panel.len()));
        }
        if self.labels.len() != n || self.splits.len() != n {
            return dim_err(format!(
                "{n} patches, {} labels, {} split codes",
                self.labels.len(),
                self.splits.len()
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.modules.len()) {
            return config_err(format!("label {l} without a matching module"));
        }
        for m in &self.modules {
            MarkerModule::new(m.name.clone(), m.members.clone(), c)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.modules.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.modules.iter().map(|m| m.name.clone()).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Patches and labels of one split, in dataset order.
    pub fn subset(&self, split: Split) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.indices(split);
        let patches = crate::ssl::pretrain::gather(&self.patches, &idx)?;
        Ok((patches, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// One patch as `[C,H,W]`.
    pub fn patch(&self, i: usize) -> Result<Tensor> {
        let (_, c, h, w) = self.patches.dims4()?;
        self.patches.slice_batch(i, 1)?.reshape(&[c, h, w])
    }
}

/// `p`-th percentile with linear interpolation between order statistics at
/// position `(n − 1)·p/100` of the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CimError::Empty("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return config_err(format!("percentile {p} outside [0, 100]"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Divide a non-negative channel by its `p`-th percentile; a zero percentile gives zeros.
pub fn normalize_percentile(channel: &[f64], p: f64) -> Result<Vec<f64>> {
    if channel.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return config_err("percentile normalisation of negative intensities");
    }
    let q = percentile(channel, p)?;
    if q == 0.0 {
        return Ok(vec![0.0; channel.len()]);
    }
    Ok(channel.iter().map(|v| v / q).collect())
}

/// Normalise every channel of `[N,C,H,W]` by its percentile over the whole set.
pub fn normalize_dataset(patches: &mut Tensor, p: f64) -> Result<Vec<f64>> {
    let (n, c, h, w) = patches.dims4()?;
    let plane = h * w;
    let mut scales = Vec::with_capacity(c);
    for ch in 0..c {
        let mut values = Vec::with_capacity(n * plane);
        for s in 0..n {
            values.extend_from_slice(&patches.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
        }
        if values.iter().any(|&v| v < 0.0 || v.is_nan()) {
            return config_err(format!("channel {ch} has negative intensities"));
        }
        let q = percentile(&values, p)?;
        for s in 0..n {
            for v in &mut patches.data_mut()[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                *v = if q > 0.0 { *v / q } else { 0.0 };
            }
        }
        scales.push(q);
    }
    Ok(scales)
}

/// Stratified assignment: per class, a seeded shuffle followed by
/// `round(f·n)` training and validation samples, the remainder test.
pub fn split_dataset(labels: &[usize], fractions: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return config_err(format!("split fractions {fractions:?} must be non-negative and sum to 1"));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![Split::Train; labels.len()];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return config_err(format!("class {class} has {} samples, need at least 3", members.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeding::stream_seed(seed, class as u64, 0x5917));
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_train = (ft * n).round() as usize;
        let n_val = ((fv * n).round() as usize).min(members.len() - n_train);
        for (k, &i) in members.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}
