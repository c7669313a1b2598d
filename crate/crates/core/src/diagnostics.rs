//! Central-difference checks of every differentiable primitive and of the
//! full CIM + NT-Xent graph, as used by the `grad-check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::grad_check;
use crate::autodiff::{BnMode, Graph, Var};
use crate::error::Result;
use crate::model::{build_cim, CimConfig, HeadConfig, HeadKind, Mode, BN_EPS};
use crate::params::ParamRole;
use crate::ssl::VicregWeights;
use crate::tensor::Tensor;

const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random-coefficient scalar readout, so every output coordinate matters.
fn readout(g: &mut Graph, v: Var, coeffs: &Tensor) -> Result<Var> {
    g.weighted_sum(v, coeffs.clone())
}

struct Suite {
    out: Vec<CheckResult>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, point: &Tensor, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let err = grad_check(f, point, STEP)?;
        self.out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
        });
        Ok(())
    }
}

/// Run every check for one random draw; returns one row per (op, argument).
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { out: Vec::new() };

    let x = uniform(&mut rng, &[2, 4, 5, 4], -1.0, 1.0);
    let cx = uniform(&mut rng, &[2, 4, 5, 4], -1.0, 1.0);
    for (groups, pad) in [(1, 1), (2, 0), (4, 1)] {
        let w = uniform(&mut rng, &[4, 4 / groups, 3, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[4], -1.0, 1.0);
        let ho = 5 + 2 * pad - 2;
        let wo = 4 + 2 * pad - 2;
        let co = uniform(&mut rng, &[2, 4, ho, wo], -1.0, 1.0);
        let tag = format!("conv2d[g={groups},p={pad}]");
        s.check(&format!("{tag}/input"), &x, |g, xv| {
            let (wv, bv) = (g.leaf(w.clone())?, g.leaf(b.clone())?);
            let y = g.conv2d(xv, wv, Some(bv), groups, pad)?;
            readout(g, y, &co)
        })?;
        s.check(&format!("{tag}/weight"), &w, |g, wv| {
            let (xv, bv) = (g.leaf(x.clone())?, g.leaf(b.clone())?);
            let y = g.conv2d(xv, wv, Some(bv), groups, pad)?;
            readout(g, y, &co)
        })?;
        s.check(&format!("{tag}/bias"), &b, |g, bv| {
            let (xv, wv) = (g.leaf(x.clone())?, g.leaf(w.clone())?);
            let y = g.conv2d(xv, wv, Some(bv), groups, pad)?;
            readout(g, y, &co)
        })?;
    }

    let gamma = uniform(&mut rng, &[4], 0.5, 1.5);
    let beta = uniform(&mut rng, &[4], -0.5, 0.5);
    let rm = uniform(&mut rng, &[4], -0.3, 0.3);
    let rv = uniform(&mut rng, &[4], 0.5, 2.0);
    for train in [true, false] {
        let mode = || {
            if train {
                BnMode::Train
            } else {
                BnMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                }
            }
        };
        let tag = if train { "batchnorm[train]" } else { "batchnorm[eval]" };
        s.check(&format!("{tag}/input"), &x, |g, xv| {
            let (gv, bv) = (g.leaf(gamma.clone())?, g.leaf(beta.clone())?);
            let (y, _) = g.batchnorm(xv, gv, bv, mode(), BN_EPS)?;
            readout(g, y, &cx)
        })?;
        s.check(&format!("{tag}/gamma"), &gamma, |g, gv| {
            let (xv, bv) = (g.leaf(x.clone())?, g.leaf(beta.clone())?);
            let (y, _) = g.batchnorm(xv, gv, bv, mode(), BN_EPS)?;
            readout(g, y, &cx)
        })?;
        s.check(&format!("{tag}/beta"), &beta, |g, bv| {
            let (xv, gv) = (g.leaf(x.clone())?, g.leaf(gamma.clone())?);
            let (y, _) = g.batchnorm(xv, gv, bv, mode(), BN_EPS)?;
            readout(g, y, &cx)
        })?;
    }

    s.check("relu", &x, |g, xv| {
        let y = g.relu(xv)?;
        readout(g, y, &cx)
    })?;
    s.check("sigmoid", &x, |g, xv| {
        let y = g.sigmoid(xv)?;
        readout(g, y, &cx)
    })?;
    s.check("add", &x, |g, xv| {
        let other = g.leaf(cx.clone())?;
        let y = g.add(xv, other)?;
        let y = g.add(y, xv)?;
        readout(g, y, &cx)
    })?;
    let pooled_c = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    s.check("global_avg_pool", &x, |g, xv| {
        let y = g.global_avg_pool(xv)?;
        readout(g, y, &pooled_c)
    })?;
    let flat_c = uniform(&mut rng, &[2, 80], -1.0, 1.0);
    s.check("reshape", &x, |g, xv| {
        let y = g.reshape(xv, &[2, 80])?;
        readout(g, y, &flat_c)
    })?;
    let gates = uniform(&mut rng, &[2, 4], 0.1, 0.9);
    s.check("scale_channels/input", &x, |g, xv| {
        let sv = g.leaf(gates.clone())?;
        let y = g.scale_channels(xv, sv)?;
        readout(g, y, &cx)
    })?;
    s.check("scale_channels/scale", &gates, |g, sv| {
        let xv = g.leaf(x.clone())?;
        let y = g.scale_channels(xv, sv)?;
        readout(g, y, &cx)
    })?;
    s.check("sum", &x, |g, xv| g.sum(xv))?;

    let lx = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let lw = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let lb = uniform(&mut rng, &[4], -1.0, 1.0);
    let lc = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    s.check("linear/input", &lx, |g, xv| {
        let (wv, bv) = (g.leaf(lw.clone())?, g.leaf(lb.clone())?);
        let y = g.linear(xv, wv, Some(bv))?;
        readout(g, y, &lc)
    })?;
    s.check("linear/weight", &lw, |g, wv| {
        let (xv, bv) = (g.leaf(lx.clone())?, g.leaf(lb.clone())?);
        let y = g.linear(xv, wv, Some(bv))?;
        readout(g, y, &lc)
    })?;
    s.check("linear/bias", &lb, |g, bv| {
        let (xv, wv) = (g.leaf(lx.clone())?, g.leaf(lw.clone())?);
        let y = g.linear(xv, wv, Some(bv))?;
        readout(g, y, &lc)
    })?;

    let z = uniform(&mut rng, &[6, 4], -1.0, 1.0);
    s.check("nt_xent", &z, |g, zv| g.nt_xent(zv, 0.2))?;
    let zb = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let za = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    s.check("vicreg/a", &za, |g, av| {
        let bv = g.leaf(zb.clone())?;
        g.vicreg(av, bv, &VicregWeights::default())
    })?;
    s.check("vicreg/b", &zb, |g, bv| {
        let av = g.leaf(za.clone())?;
        g.vicreg(av, bv, &VicregWeights::default())
    })?;
    let labels = [0usize, 2, 1];
    let cw = Tensor::new(&[3], vec![0.5, 1.0, 2.0])?;
    let logits = uniform(&mut rng, &[3, 3], -2.0, 2.0);
    s.check("weighted_cross_entropy", &logits, |g, lv| g.weighted_cross_entropy(lv, &labels, &cw))?;

    full_model(&mut s, &mut rng)?;
    Ok(s.out)
}

fn full_model(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = CimConfig {
        markers: 3,
        width: 4,
        depth: 1,
        se_reduction: 2,
        head: HeadConfig {
            projection_dim: Some(6),
            num_classes: None,
            classifier_hidden: 8,
        },
        input_size: 6,
        seed: rng.random(),
    };
    let mut model = build_cim(cfg)?;
    for (name, t) in model.params_mut().iter_mut() {
        if matches!(ParamRole::of(name), ParamRole::Bias | ParamRole::BnShift) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let x = uniform(rng, &[4, 3, 6, 6], 0.0, 1.0);
    let loss = |g: &mut Graph, xv: Var, sub: Option<(&str, Var)>| -> Result<Var> {
        let mut pv = model.params().register(g)?;
        if let Some((name, v)) = sub {
            pv.substitute(name, v)?;
        }
        let f = model.forward_features(g, &pv, xv, Mode::Train)?;
        let z = model.forward_head(g, &pv, f.pooled, HeadKind::Projection)?;
        g.nt_xent(z, 0.2)
    };
    s.check("cim+nt_xent/input", &x, |g, xv| loss(g, xv, None))?;
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|(n, _)| ParamRole::of(n).is_learnable())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let point = model.params().get(&name)?.clone();
        s.check(&format!("cim+nt_xent/{name}"), &point, |g, pvar| {
            let xv = g.leaf(x.clone())?;
            loss(g, xv, Some((&name, pvar)))
        })?;
    }
    Ok(())
}
