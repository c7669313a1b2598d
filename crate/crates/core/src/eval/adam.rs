//! Adam with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CimError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0 && (0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2) && config.eps > 0.0)
        {
            return config_err(format!("invalid Adam settings {config:?}"));
        }
        Ok(Self {
            config,
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter named in `grads`; nothing changes if any
    /// resulting value is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        let t = self.t + 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let mut staged = Vec::with_capacity(grads.len());
        for (name, g) in grads {
            let w = params.get(name)?;
            let n = g.len();
            let m_prev = self.m.get(name);
            let v_prev = self.v.get(name);
            let mut m = vec![0.0; n];
            let mut v = vec![0.0; n];
            let mut w_new = w.data().to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = c.beta1 * m_prev.map_or(0.0, |p| p[i]) + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v_prev.map_or(0.0, |p| p[i]) + (1.0 - c.beta2) * gi * gi;
                w_new[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
            if w_new.iter().any(|x| !x.is_finite()) {
                return Err(CimError::NonFinite(format!("Adam update for {name}")));
            }
            staged.push((name.clone(), m, v, Tensor::new(w.shape(), w_new)?));
        }
        for (name, m, v, w) in staged {
            *params.get_mut(&name)? = w;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        self.t = t;
        Ok(())
    }
}
