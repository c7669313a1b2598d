//! Synthetic multiplex cell patches with known phenotype structure.
//!
//! Every patch holds one cell at its centre. The cell's phenotype is drawn by
//! frequency; each marker of that phenotype's module carries a soft disk, and
//! every channel carries uniform background. An optional bleed-through spec
//! adds a diffuse, spatially smooth field to one channel in all cells.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalize_dataset, split_dataset, DatasetBundle, MarkerModule, MarkerPanel, ModuleSpec};
use crate::error::{config_err, CimError, Result};
use crate::seeding::stream_seed;
use crate::tensor::Tensor;

/// Width of the Gaussian shoulder outside the disk radius, in pixels.
const EDGE_SIGMA: f64 = 1.0;
const RARE_FREQUENCY: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeSpec {
    pub name: String,
    pub markers: Vec<String>,
    pub frequency: f64,
    /// Mean peak intensity before normalisation.
    pub intensity: f64,
    /// Nominal disk radius in pixels; jittered by ±20 % per cell.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleedThrough {
    pub marker: String,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub markers: Vec<String>,
    pub phenotypes: Vec<PhenotypeSpec>,
    /// Background is Uniform[0, noise] per pixel.
    pub noise: f64,
    pub bleed: Option<BleedThrough>,
    pub patch_size: usize,
    pub patches: usize,
    pub fractions: [f64; 3],
    /// Dataset-wide per-channel percentile used for normalisation; `None` keeps raw values.
    pub percentile: Option<f64>,
    /// Require at least one phenotype with frequency ≤ 2 %.
    pub require_rare: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::preset(8).expect("built-in preset")
    }
}

fn pheno(name: &str, markers: &[&str], frequency: f64, intensity: f64, radius: f64) -> PhenotypeSpec {
    PhenotypeSpec {
        name: name.into(),
        markers: markers.iter().map(|m| m.to_string()).collect(),
        frequency,
        intensity,
        radius,
    }
}

const CORE_MARKERS: [&str; 8] = ["CD20", "CD3", "CD30", "CD68", "CD31", "Tryptase", "CD45", "CD15"];
const EXTRA_MARKERS: [&str; 10] = ["CD4", "CD8", "FOXP3", "CD11c", "Ki67", "PD1", "PDL1", "CD56", "CD163", "HLA-DR"];

impl SynthConfig {
    /// Six phenotypes, two of them rare, on a panel of 8, 18 or 49 markers.
    ///
    /// Markers beyond the first eight carry background only. The rare
    /// phenotypes are dim: their peak sits below the background ceiling.
    pub fn preset(markers: usize) -> Result<Self> {
        let mut names: Vec<String> = CORE_MARKERS.iter().map(|s| s.to_string()).collect();
        match markers {
            8 => {}
            18 => names.extend(EXTRA_MARKERS.iter().map(|s| s.to_string())),
            49 => {
                names.extend(EXTRA_MARKERS.iter().map(|s| s.to_string()));
                names.extend((names.len() + 1..=49).map(|i| format!("Marker{i}")));
            }
            other => return config_err(format!("no preset for {other} markers (8, 18 or 49)")),
        }
        Ok(Self {
            markers: names,
            phenotypes: vec![
                pheno("B", &["CD20", "CD45"], 0.32, 1.0, 4.0),
                pheno("T", &["CD3", "CD45"], 0.32, 1.0, 3.5),
                pheno("Tumor", &["CD30", "CD15"], 0.18, 1.0, 6.0),
                pheno("Myeloid", &["CD68", "CD45"], 0.14, 0.9, 5.0),
                pheno("Endothelial", &["CD31"], RARE_FREQUENCY, 0.25, 3.0),
                pheno("Mast", &["Tryptase"], RARE_FREQUENCY, 0.25, 4.5),
            ],
            noise: 0.5,
            bleed: None,
            patch_size: 24,
            patches: 6000,
            fractions: [0.7, 0.2, 0.1],
            percentile: Some(99.9),
            require_rare: true,
            seed: 0,
        })
    }

    pub fn panel(&self) -> Result<MarkerPanel> {
        MarkerPanel::new(self.markers.clone())
    }

    pub fn modules(&self) -> Result<Vec<MarkerModule>> {
        let panel = self.panel()?;
        self.phenotypes
            .iter()
            .map(|p| {
                MarkerModule::resolve(
                    &ModuleSpec {
                        name: p.name.clone(),
                        markers: p.markers.clone(),
                    },
                    &panel,
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phenotypes.is_empty() {
            return Err(CimError::Empty("phenotype list".into()));
        }
        let total: f64 = self.phenotypes.iter().map(|p| p.frequency).sum();
        if (total - 1.0).abs() > 1e-9 || self.phenotypes.iter().any(|p| p.frequency < 0.0) {
            return config_err(format!("phenotype frequencies sum to {total}, expected 1"));
        }
        if self.require_rare && !self.phenotypes.iter().any(|p| p.frequency <= RARE_FREQUENCY + 1e-12) {
            return config_err("rare-class mode needs a phenotype with frequency <= 2%");
        }
        if self.patch_size == 0 || self.patches == 0 {
            return config_err("patch size and count must be positive");
        }
        if self.noise < 0.0 || self.phenotypes.iter().any(|p| p.intensity < 0.0 || p.radius <= 0.0) {
            return config_err("noise and intensities must be >= 0, radii > 0");
        }
        if let Some(b) = &self.bleed {
            self.panel()?.index_of(&b.marker)?;
            if b.amplitude < 0.0 {
                return config_err("bleed-through amplitude must be >= 0");
            }
        }
        self.modules()?;
        Ok(())
    }
}

fn render_cell(cfg: &SynthConfig, modules: &[MarkerModule], bleed: Option<(usize, f64)>, seed: u64) -> (usize, Vec<f64>) {
    let c = cfg.markers.len();
    let s = cfg.patch_size;
    let plane = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut label = cfg.phenotypes.len() - 1;
    for (k, p) in cfg.phenotypes.iter().enumerate() {
        acc += p.frequency;
        if u < acc {
            label = k;
            break;
        }
    }
    let spec = &cfg.phenotypes[label];
    let radius = spec.radius * rng.random_range(0.8..=1.2);
    let centre = (s as f64 - 1.0) / 2.0;

    let mut out = vec![0.0; c * plane];
    if cfg.noise > 0.0 {
        for v in out.iter_mut() {
            *v = rng.random_range(0.0..cfg.noise);
        }
    }
    let sd = 0.1 * spec.intensity;
    for &m in &modules[label].members {
        let peak = if sd > 0.0 {
            Normal::new(spec.intensity, sd).expect("positive sd").sample(&mut rng).max(0.0)
        } else {
            spec.intensity
        };
        for y in 0..s {
            for x in 0..s {
                let d = ((y as f64 - centre).powi(2) + (x as f64 - centre).powi(2)).sqrt();
                let profile = if d <= radius {
                    1.0
                } else {
                    (-(d - radius).powi(2) / (2.0 * EDGE_SIGMA * EDGE_SIGMA)).exp()
                };
                out[m * plane + y * s + x] += peak * profile;
            }
        }
    }
    if let Some((ch, amp)) = bleed {
        // smooth plane: random level plus a gentle gradient
        let level = rng.random_range(0.5..1.0);
        let gy = rng.random_range(-0.5..0.5);
        let gx = rng.random_range(-0.5..0.5);
        for y in 0..s {
            for x in 0..s {
                let t = level + gy * (y as f64 / s as f64 - 0.5) + gx * (x as f64 / s as f64 - 0.5);
                out[ch * plane + y * s + x] += amp * t.max(0.0);
            }
        }
    }
    (label, out)
}

/// Generate, normalise and split a synthetic dataset. Patch values are
/// rounded to `f32` precision so the bundle survives a file round-trip bit-exactly.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let panel = cfg.panel()?;
    let modules = cfg.modules()?;
    let bleed = match &cfg.bleed {
        Some(b) => Some((panel.index_of(&b.marker)?, b.amplitude)),
        None => None,
    };
    let cells: Vec<(usize, Vec<f64>)> = (0..cfg.patches)
        .into_par_iter()
        .map(|i| render_cell(cfg, &modules, bleed, stream_seed(cfg.seed, i as u64, 0x6E4)))
        .collect();
    let s = cfg.patch_size;
    let mut labels = Vec::with_capacity(cfg.patches);
    let mut data = Vec::with_capacity(cfg.patches * panel.len() * s * s);
    for (l, v) in cells {
        labels.push(l);
        data.extend(v);
    }
    let mut patches = Tensor::new(&[cfg.patches, panel.len(), s, s], data)?;
    if let Some(p) = cfg.percentile {
        normalize_dataset(&mut patches, p)?;
    }
    for v in patches.data_mut() {
        *v = *v as f32 as f64;
    }
    let [ft, fv, fs] = cfg.fractions;
    let splits = split_dataset(&labels, (ft, fv, fs), cfg.seed)?;
    let bundle = DatasetBundle {
        patches,
        labels,
        panel,
        modules,
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Centre of patch `id` on a virtual square slide holding `total` patches.
pub fn patch_position(id: usize, total: usize, patch_size: usize) -> (usize, usize) {
    let cols = (total as f64).sqrt().ceil().max(1.0) as usize;
    let half = patch_size / 2;
    ((id % cols) * patch_size + half, (id / cols) * patch_size + half)
}
