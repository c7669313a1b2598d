//! Stochastic multi-view augmentation of multiplex patches.
//!
//! Geometric transforms (flips, rotation/translation/scale with bilinear
//! resampling) are shared by every channel of a patch; intensity scaling is
//! drawn per channel, noise per pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

pub use crate::seeding::stream_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugStrength {
    Weak,
    #[default]
    Default,
    Strong,
}

impl AugStrength {
    fn factor(self) -> f64 {
        match self {
            AugStrength::Weak => 0.5,
            AugStrength::Default => 1.0,
            AugStrength::Strong => 2.0,
        }
    }
}

impl std::str::FromStr for AugStrength {
    type Err = crate::CimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(AugStrength::Weak),
            "default" => Ok(AugStrength::Default),
            "strong" => Ok(AugStrength::Strong),
            other => config_err(format!("unknown augmentation strength {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_flip: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of the patch side.
    pub translation: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Per-channel intensity factors are drawn from `[1 - a, 1 + a]`.
    pub intensity: f64,
    pub noise_std: f64,
    pub strength: AugStrength,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            rotation_deg: 15.0,
            translation: 0.1,
            scale_lo: 0.9,
            scale_hi: 1.1,
            intensity: 0.2,
            noise_std: 0.05,
            strength: AugStrength::Default,
        }
    }
}

impl AugmentConfig {
    /// Default ranges with intensity amplitude, noise and rotation scaled by the preset.
    pub fn preset(strength: AugStrength) -> Self {
        let f = strength.factor();
        let base = Self::default();
        Self {
            rotation_deg: base.rotation_deg * f,
            intensity: base.intensity * f,
            noise_std: base.noise_std * f,
            strength,
            ..base
        }
    }

    /// Every random component switched off.
    pub fn identity() -> Self {
        Self {
            p_flip: 0.0,
            rotation_deg: 0.0,
            translation: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            intensity: 0.0,
            noise_std: 0.0,
            strength: AugStrength::Default,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_flip) {
            return config_err(format!("p_flip {} outside [0, 1]", self.p_flip));
        }
        if !(self.scale_lo <= 1.0 && 1.0 <= self.scale_hi && self.scale_lo > 0.0) {
            return config_err(format!(
                "scale range [{}, {}] must be positive and contain 1",
                self.scale_lo, self.scale_hi
            ));
        }
        if !(0.0..1.0).contains(&self.intensity) {
            return config_err(format!("intensity amplitude {} outside [0, 1)", self.intensity));
        }
        if !(self.noise_std >= 0.0 && self.rotation_deg >= 0.0 && self.translation >= 0.0) {
            return config_err("noise, rotation and translation ranges must be non-negative");
        }
        Ok(())
    }
}

/// The random draws behind one augmented view, kept for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraws {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_rad: f64,
    /// Translation in pixels, `(dy, dx)`.
    pub shift: (f64, f64),
    pub scale: f64,
    pub channel_scale: Vec<f64>,
}

impl AugmentDraws {
    pub fn sample<R: Rng>(cfg: &AugmentConfig, channels: usize, side: usize, rng: &mut R) -> Self {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let flip_h = cfg.p_flip > 0.0 && rng.random::<f64>() < cfg.p_flip;
        let flip_v = cfg.p_flip > 0.0 && rng.random::<f64>() < cfg.p_flip;
        let rotation_rad = sym(rng, cfg.rotation_deg).to_radians();
        let t = cfg.translation * side as f64;
        let shift = (sym(rng, t), sym(rng, t));
        let scale = if cfg.scale_hi > cfg.scale_lo {
            rng.random_range(cfg.scale_lo..=cfg.scale_hi)
        } else {
            cfg.scale_lo
        };
        let channel_scale = (0..channels).map(|_| 1.0 + sym(rng, cfg.intensity)).collect();
        Self {
            flip_h,
            flip_v,
            rotation_rad,
            shift,
            scale,
            channel_scale,
        }
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_rad == 0.0 && self.shift == (0.0, 0.0) && self.scale == 1.0
    }
}

fn dims3(patch: &Tensor) -> Result<(usize, usize, usize)> {
    match patch.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => dim_err(format!("expected a [C,H,W] patch, got {s:?}")),
    }
}

/// Mirror every channel left-to-right.
pub fn flip_horizontal(patch: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(patch)?;
    let src = patch.data();
    Tensor::new(&[c, h, w], (0..c * h * w).map(|i| src[i - i % w + (w - 1 - i % w)]).collect())
}

/// Mirror every channel top-to-bottom.
pub fn flip_vertical(patch: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(patch)?;
    let src = patch.data();
    let plane = h * w;
    Tensor::new(
        &[c, h, w],
        (0..c * plane)
            .map(|i| {
                let (ch, y, x) = (i / plane, (i % plane) / w, i % w);
                src[ch * plane + (h - 1 - y) * w + x]
            })
            .collect(),
    )
}

/// Rotate by `theta`, scale by `s` and shift by `(dy, dx)` about the patch centre.
///
/// Output pixels are pulled back through the inverse map and bilinearly
/// interpolated; samples falling outside the patch read as zero.
pub fn affine(patch: &Tensor, theta: f64, s: f64, shift: (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = dims3(patch)?;
    if s <= 0.0 {
        return config_err("affine scale must be positive");
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    let src = patch.data();
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[ch * plane + y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy - shift.0;
            let dx = x as f64 - cx - shift.1;
            // inverse rotation then inverse scale
            let sy = (cos * dy - sin * dx) / s + cy;
            let sx = (sin * dy + cos * dx) / s + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let top = at(ch, y0, x0) * (1.0 - fx) + if fx > 0.0 { at(ch, y0, x0 + 1) * fx } else { 0.0 };
                let v = if fy > 0.0 {
                    let bottom = at(ch, y0 + 1, x0) * (1.0 - fx) + if fx > 0.0 { at(ch, y0 + 1, x0 + 1) * fx } else { 0.0 };
                    top * (1.0 - fy) + bottom * fy
                } else {
                    top
                };
                out[ch * plane + y * w + x] = v;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Apply recorded draws, then add noise from `rng` and clamp below at zero.
pub fn apply_draws<R: Rng>(patch: &Tensor, draws: &AugmentDraws, noise_std: f64, rng: &mut R) -> Result<Tensor> {
    let (c, h, w) = dims3(patch)?;
    if draws.channel_scale.len() != c {
        return dim_err(format!(
            "{} channel scales recorded for a {c}-channel patch",
            draws.channel_scale.len()
        ));
    }
    let mut out = patch.clone();
    if draws.flip_h {
        out = flip_horizontal(&out)?;
    }
    if draws.flip_v {
        out = flip_vertical(&out)?;
    }
    if !draws.is_affine_identity() {
        out = affine(&out, draws.rotation_rad, draws.scale, draws.shift)?;
    }
    let plane = h * w;
    let noise = if noise_std > 0.0 {
        Some(Normal::new(0.0, noise_std).map_err(|e| crate::CimError::Config(e.to_string()))?)
    } else {
        None
    };
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= draws.channel_scale[i / plane];
        if let Some(n) = &noise {
            *v += n.sample(rng);
        }
        *v = v.max(0.0);
    }
    Ok(out)
}

/// Augment a single `[C,H,W]` patch, returning the view and the draws used.
pub fn augment_recorded<R: Rng>(patch: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<(Tensor, AugmentDraws)> {
    let (c, h, w) = dims3(patch)?;
    let draws = AugmentDraws::sample(cfg, c, h.max(w), rng);
    let out = apply_draws(patch, &draws, cfg.noise_std, rng)?;
    Ok((out, draws))
}

pub fn augment<R: Rng>(patch: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor> {
    augment_recorded(patch, cfg, rng).map(|(t, _)| t)
}

/// Augment every patch of an `[N,C,H,W]` batch with independent streams.
///
/// `stream_base` identifies the draw (for example run seed mixed with the
/// iteration); output does not depend on thread scheduling.
pub fn augment_batch(batch: &Tensor, cfg: &AugmentConfig, stream_base: u64, view_index: u64) -> Result<Tensor> {
    let (n, c, h, w) = batch.dims4()?;
    cfg.validate()?;
    let plane = c * h * w;
    let views: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let patch = Tensor::new(&[c, h, w], batch.data()[i * plane..(i + 1) * plane].to_vec())?;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(stream_base, i as u64, view_index));
            Ok(augment(&patch, cfg, &mut rng)?.into_data())
        })
        .collect();
    let mut data = Vec::with_capacity(n * plane);
    for v in views {
        data.extend(v?);
    }
    Tensor::new(&[n, c, h, w], data)
}
