//! Layer-wise adaptive rate scaling with momentum.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, CimError, Result};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LarsConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust: f64,
    /// Added to the trust-ratio denominator.
    pub eps: f64,
    /// When false every tensor uses a local rate of 1 (plain momentum SGD).
    pub adaptation: bool,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust: 1e-3,
            eps: 0.0,
            adaptation: true,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.weight_decay < 0.0 || self.trust <= 0.0 || self.eps < 0.0 {
            return config_err("weight decay and eps must be >= 0, trust > 0");
        }
        Ok(())
    }
}

/// Biases and batch-norm affine parameters skip adaptation and decay.
pub fn is_exempt(name: &str) -> bool {
    matches!(ParamRole::of(name), ParamRole::Bias | ParamRole::BnScale | ParamRole::BnShift)
}

/// `lr · 0.5 · (1 + cos(π t / T))`, no warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct LarsState {
    config: LarsConfig,
    buffers: IndexMap<String, Tensor>,
}

impl LarsState {
    pub fn new(config: LarsConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffers: IndexMap::new(),
        })
    }

    pub fn config(&self) -> &LarsConfig {
        &self.config
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    /// Local learning-rate multiplier for one tensor.
    pub fn trust_ratio(&self, name: &str, w: &Tensor, g: &Tensor) -> f64 {
        if !self.config.adaptation || is_exempt(name) {
            return 1.0;
        }
        let (wn, gn) = (w.norm(), g.norm());
        if wn > 0.0 && gn > 0.0 {
            self.config.trust * wn / (gn + self.config.weight_decay * wn + self.config.eps)
        } else {
            1.0
        }
    }

    /// One update with learning rate `lr` (the scheduled value of η).
    ///
    /// Updates are computed for every tensor first and committed only if all
    /// are finite, so a failing step leaves parameters and buffers untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        let mut pending = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let w = params.get(name)?;
            if w.shape() != g.shape() {
                return dim_err(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    w.shape()
                ));
            }
            let local = self.trust_ratio(name, w, g);
            // tensors the loss did not reach are not decayed
            let wd = if is_exempt(name) || g.max_abs() == 0.0 { 0.0 } else { self.config.weight_decay };
            let prev = self.buffers.get(name);
            let update: Vec<f64> = w
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&wi, &gi))| {
                    let b = prev.map_or(0.0, |p| p.data()[i]);
                    self.config.momentum * b + local * lr * (gi + wd * wi)
                })
                .collect();
            if update.iter().any(|u| !u.is_finite()) {
                return Err(CimError::NonFinite(format!("optimizer update for {name}")));
            }
            pending.push((name.clone(), Tensor::new(g.shape(), update)?));
        }
        for (name, update) in pending {
            let w = params.get_mut(&name)?;
            w.axpy(-1.0, &update)?;
            self.buffers.insert(name, update);
        }
        Ok(())
    }
}
