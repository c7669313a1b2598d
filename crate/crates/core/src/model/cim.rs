//! Channel-independent backbone. Every layer before the head is grouped by
//! marker, so channels `[c·k, (c+1)·k)` only ever see input channel `c`.

use super::{bn_specs, CimConfig, Features, Mode, Model, ParamSpec};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamVars;

pub(super) fn specs(cfg: &CimConfig) -> Vec<ParamSpec> {
    let (c, k, h) = (cfg.markers, cfg.width, cfg.se_hidden());
    let d = c * k;
    let mut specs = vec![
        ParamSpec::kaiming("stem.weight", &[d, 1, 1, 1]),
        ParamSpec::zeros("stem.bias", &[d]),
    ];
    specs.extend(bn_specs("stem_bn", d));
    for b in 0..cfg.depth {
        let p = format!("blocks.{b}");
        specs.push(ParamSpec::kaiming(format!("{p}.dw.weight"), &[d, 1, 3, 3]));
        specs.push(ParamSpec::zeros(format!("{p}.dw.bias"), &[d]));
        specs.extend(bn_specs(&format!("{p}.bn1"), d));
        specs.push(ParamSpec::kaiming(format!("{p}.se.fc1.weight"), &[c * h, k, 1, 1]));
        specs.push(ParamSpec::zeros(format!("{p}.se.fc1.bias"), &[c * h]));
        specs.push(ParamSpec::kaiming(format!("{p}.se.fc2.weight"), &[d, h, 1, 1]));
        specs.push(ParamSpec::zeros(format!("{p}.se.fc2.bias"), &[d]));
        specs.push(ParamSpec::kaiming(format!("{p}.pw.weight"), &[d, k, 1, 1]));
        specs.push(ParamSpec::zeros(format!("{p}.pw.bias"), &[d]));
        specs.extend(bn_specs(&format!("{p}.bn2"), d));
    }
    specs
}

/// Per-marker squeeze-and-excitation gates `[N, C·k]`: spatial mean of each
/// channel, then `k → k/r → k` within each marker group, ReLU, sigmoid.
pub fn se_gates(cfg: &CimConfig, g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let (n, d, _, _) = g.value(x).dims4()?;
    let s = g.global_avg_pool(x)?;
    let s = g.reshape(s, &[n, d, 1, 1])?;
    let s = g.conv2d(
        s,
        pv.get(&format!("{prefix}.fc1.weight"))?,
        Some(pv.get(&format!("{prefix}.fc1.bias"))?),
        cfg.markers,
        0,
    )?;
    let s = g.relu(s)?;
    let s = g.conv2d(
        s,
        pv.get(&format!("{prefix}.fc2.weight"))?,
        Some(pv.get(&format!("{prefix}.fc2.bias"))?),
        cfg.markers,
        0,
    )?;
    let s = g.sigmoid(s)?;
    g.reshape(s, &[n, d])
}

/// Squeeze-and-excitation applied to `x`.
pub fn se_gate(cfg: &CimConfig, g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let gates = se_gates(cfg, g, pv, x, prefix)?;
    g.scale_channels(x, gates)
}

pub(super) fn forward(
    model: &Model,
    cfg: &CimConfig,
    g: &mut Graph,
    pv: &ParamVars,
    x: Var,
    mode: Mode,
) -> Result<Features> {
    let c = cfg.markers;
    let d = cfg.feature_dim();
    let mut updates = Vec::new();

    let h = g.conv2d(x, pv.get("stem.weight")?, Some(pv.get("stem.bias")?), c, 0)?;
    let h = model.batchnorm(g, pv, h, "stem_bn", mode, &mut updates)?;
    let mut a = g.relu(h)?;

    for b in 0..cfg.depth {
        let p = format!("blocks.{b}");
        let h = g.conv2d(a, pv.get(&format!("{p}.dw.weight"))?, Some(pv.get(&format!("{p}.dw.bias"))?), d, 1)?;
        let h = model.batchnorm(g, pv, h, &format!("{p}.bn1"), mode, &mut updates)?;
        let h = g.relu(h)?;
        let h = se_gate(cfg, g, pv, h, &format!("{p}.se"))?;
        let h = g.conv2d(h, pv.get(&format!("{p}.pw.weight"))?, Some(pv.get(&format!("{p}.pw.bias"))?), c, 0)?;
        let h = model.batchnorm(g, pv, h, &format!("{p}.bn2"), mode, &mut updates)?;
        let u = g.add(h, a)?;
        a = g.relu(u)?;
    }

    let pooled = g.global_avg_pool(a)?;
    Ok(Features {
        prefusion: a,
        pooled,
        bn_updates: updates,
    })
}

/// Maps each marker to its block of `k` channels in the pre-fusion representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureBlockView {
    pub markers: usize,
    pub width: usize,
}

impl FeatureBlockView {
    pub fn new(cfg: &CimConfig) -> Self {
        Self {
            markers: cfg.markers,
            width: cfg.width,
        }
    }

    pub fn range(&self, marker: usize) -> std::ops::Range<usize> {
        marker * self.width..(marker + 1) * self.width
    }

    pub fn marker_of(&self, channel: usize) -> usize {
        channel / self.width
    }
}
