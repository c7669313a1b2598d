//! Early-fusion baseline: a full-mixing 3×3 convolution followed by one
//! standard residual block.

use super::{bn_specs, BaselineConfig, Features, Mode, Model, ParamSpec};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamVars;

pub(super) fn specs(cfg: &BaselineConfig) -> Vec<ParamSpec> {
    let (c, w) = (cfg.markers, cfg.width);
    let mut specs = vec![
        ParamSpec::kaiming("conv1.weight", &[w, c, 3, 3]),
        ParamSpec::zeros("conv1.bias", &[w]),
    ];
    specs.extend(bn_specs("bn1", w));
    for l in ["a", "b"] {
        specs.push(ParamSpec::kaiming(format!("res.conv_{l}.weight"), &[w, w, 3, 3]));
        specs.push(ParamSpec::zeros(format!("res.conv_{l}.bias"), &[w]));
        specs.extend(bn_specs(&format!("res.bn_{l}"), w));
    }
    specs
}

pub(super) fn forward(
    model: &Model,
    _cfg: &BaselineConfig,
    g: &mut Graph,
    pv: &ParamVars,
    x: Var,
    mode: Mode,
) -> Result<Features> {
    let mut updates = Vec::new();
    let h = g.conv2d(x, pv.get("conv1.weight")?, Some(pv.get("conv1.bias")?), 1, 1)?;
    let h = model.batchnorm(g, pv, h, "bn1", mode, &mut updates)?;
    let a = g.relu(h)?;

    let h = g.conv2d(a, pv.get("res.conv_a.weight")?, Some(pv.get("res.conv_a.bias")?), 1, 1)?;
    let h = model.batchnorm(g, pv, h, "res.bn_a", mode, &mut updates)?;
    let h = g.relu(h)?;
    let h = g.conv2d(h, pv.get("res.conv_b.weight")?, Some(pv.get("res.conv_b.bias")?), 1, 1)?;
    let h = model.batchnorm(g, pv, h, "res.bn_b", mode, &mut updates)?;
    let u = g.add(h, a)?;
    let out = g.relu(u)?;

    let pooled = g.global_avg_pool(out)?;
    Ok(Features {
        prefusion: out,
        pooled,
        bn_updates: updates,
    })
}
