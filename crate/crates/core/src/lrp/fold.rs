//! Eval-mode CIM with batch norm folded into the preceding convolutions, and
//! a single-patch forward pass that keeps every intermediate activation.

use crate::error::{config_err, CimError, Result};
use crate::model::{CimConfig, Model, ModelConfig, BN_EPS};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct FoldedBlock {
    /// Depthwise 3×3 weights `[D·9]` and bias `[D]`.
    pub dw_w: Vec<f64>,
    pub dw_b: Vec<f64>,
    /// Per-marker SE weights `[C·h, k]`, `[C·h]`, `[D, h]`, `[D]`.
    pub se1_w: Vec<f64>,
    pub se1_b: Vec<f64>,
    pub se2_w: Vec<f64>,
    pub se2_b: Vec<f64>,
    /// Grouped pointwise weights `[D, k]` and bias `[D]`.
    pub pw_w: Vec<f64>,
    pub pw_b: Vec<f64>,
}

/// Classifier head `linear → ReLU → linear`.
#[derive(Debug, Clone)]
pub struct FoldedHead {
    pub hidden: usize,
    pub classes: usize,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FoldedCim {
    pub markers: usize,
    pub width: usize,
    pub se_hidden: usize,
    pub stem_w: Vec<f64>,
    pub stem_b: Vec<f64>,
    pub blocks: Vec<FoldedBlock>,
    pub head: Option<FoldedHead>,
}

/// Activations of one patch, planes stored `[D, H·W]`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub h: usize,
    pub w: usize,
    pub input: Vec<f64>,
    pub stem_pre: Vec<f64>,
    pub blocks: Vec<BlockTrace>,
    pub pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Block input (post-ReLU).
    pub input: Vec<f64>,
    pub dw_pre: Vec<f64>,
    pub gates: Vec<f64>,
    /// Gated depthwise output feeding the pointwise layer.
    pub gated: Vec<f64>,
    pub pw_pre: Vec<f64>,
    /// Residual sum before the final ReLU.
    pub sum: Vec<f64>,
    pub output: Vec<f64>,
}

fn get<'a>(p: &'a ParamStore, name: &str) -> Result<&'a [f64]> {
    Ok(p.get(name)?.data())
}

/// `(scale, shift)` with `bn(z) = scale·z + shift` under running statistics.
fn bn_affine(p: &ParamStore, prefix: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let gamma = get(p, &format!("{prefix}.gamma"))?;
    let beta = get(p, &format!("{prefix}.beta"))?;
    let mean = get(p, &format!("{prefix}.running_mean"))?;
    let var = get(p, &format!("{prefix}.running_var"))?;
    if var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
        return config_err(format!("{prefix} has no usable running statistics"));
    }
    let scale: Vec<f64> = gamma.iter().zip(var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
    let shift = beta.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
    Ok((scale, shift))
}

/// Multiply each output row of `w` (`per_out` values each) and fold the bias.
fn fold(w: &[f64], b: &[f64], scale: &[f64], shift: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let per_out = w.len() / scale.len();
    let w = w.iter().enumerate().map(|(i, v)| v * scale[i / per_out]).collect();
    let b = b.iter().zip(scale).zip(shift).map(|((b, s), t)| b * s + t).collect();
    (w, b)
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

impl FoldedCim {
    pub fn from_model(model: &Model) -> Result<Self> {
        let ModelConfig::Cim(cfg) = model.config() else {
            return config_err("relevance propagation needs a channel-independent model");
        };
        Self::from_params(cfg, model.params())
    }

    pub fn from_params(cfg: &CimConfig, p: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (scale, shift) = bn_affine(p, "stem_bn")?;
        let (stem_w, stem_b) = fold(get(p, "stem.weight")?, get(p, "stem.bias")?, &scale, &shift);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let pre = format!("blocks.{b}");
            let (s1, t1) = bn_affine(p, &format!("{pre}.bn1"))?;
            let (dw_w, dw_b) = fold(get(p, &format!("{pre}.dw.weight"))?, get(p, &format!("{pre}.dw.bias"))?, &s1, &t1);
            let (s2, t2) = bn_affine(p, &format!("{pre}.bn2"))?;
            let (pw_w, pw_b) = fold(get(p, &format!("{pre}.pw.weight"))?, get(p, &format!("{pre}.pw.bias"))?, &s2, &t2);
            blocks.push(FoldedBlock {
                dw_w,
                dw_b,
                se1_w: get(p, &format!("{pre}.se.fc1.weight"))?.to_vec(),
                se1_b: get(p, &format!("{pre}.se.fc1.bias"))?.to_vec(),
                se2_w: get(p, &format!("{pre}.se.fc2.weight"))?.to_vec(),
                se2_b: get(p, &format!("{pre}.se.fc2.bias"))?.to_vec(),
                pw_w,
                pw_b,
            });
        }
        let head = match cfg.head.num_classes {
            Some(classes) => Some(FoldedHead {
                hidden: cfg.head.classifier_hidden,
                classes,
                fc1_w: get(p, "cls.fc1.weight")?.to_vec(),
                fc1_b: get(p, "cls.fc1.bias")?.to_vec(),
                fc2_w: get(p, "cls.fc2.weight")?.to_vec(),
                fc2_b: get(p, "cls.fc2.bias")?.to_vec(),
            }),
            None => None,
        };
        Ok(Self {
            markers: cfg.markers,
            width: cfg.width,
            se_hidden: cfg.se_hidden(),
            stem_w,
            stem_b,
            blocks,
            head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.markers * self.width
    }

    /// Eval-mode forward pass of one `[C, H, W]` patch.
    pub fn forward(&self, patch: &[f64], h: usize, w: usize) -> Result<Trace> {
        let (c, k, d, hw) = (self.markers, self.width, self.feature_dim(), h * w);
        if patch.len() != c * hw {
            return Err(CimError::Dimension(format!(
                "patch has {} values, expected {c}×{h}×{w}",
                patch.len()
            )));
        }
        let mut stem_pre = vec![0.0; d * hw];
        for ch in 0..d {
            let x = &patch[(ch / k) * hw..(ch / k + 1) * hw];
            for (o, &v) in stem_pre[ch * hw..(ch + 1) * hw].iter_mut().zip(x) {
                *o = self.stem_w[ch] * v + self.stem_b[ch];
            }
        }
        let mut a: Vec<f64> = stem_pre.iter().map(|&v| relu(v)).collect();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let dw_pre = depthwise(&a, &blk.dw_w, &blk.dw_b, d, h, w);
            let act: Vec<f64> = dw_pre.iter().map(|&v| relu(v)).collect();
            let gates = self.se_gates(blk, &act, hw);
            let gated: Vec<f64> = act.iter().enumerate().map(|(i, v)| v * gates[i / hw]).collect();
            let mut pw_pre = vec![0.0; d * hw];
            for o in 0..d {
                let base = (o / k) * k;
                let out = &mut pw_pre[o * hw..(o + 1) * hw];
                out.fill(blk.pw_b[o]);
                for j in 0..k {
                    let wv = blk.pw_w[o * k + j];
                    for (y, &g) in out.iter_mut().zip(&gated[(base + j) * hw..(base + j + 1) * hw]) {
                        *y += wv * g;
                    }
                }
            }
            let sum: Vec<f64> = pw_pre.iter().zip(&a).map(|(p, r)| p + r).collect();
            let output: Vec<f64> = sum.iter().map(|&v| relu(v)).collect();
            blocks.push(BlockTrace {
                input: std::mem::replace(&mut a, output.clone()),
                dw_pre,
                gates,
                gated,
                pw_pre,
                sum,
                output,
            });
        }
        let pooled = a.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        Ok(Trace {
            h,
            w,
            input: patch.to_vec(),
            stem_pre,
            blocks,
            pooled,
        })
    }

    fn se_gates(&self, blk: &FoldedBlock, act: &[f64], hw: usize) -> Vec<f64> {
        let (k, hid) = (self.width, self.se_hidden);
        let mean: Vec<f64> = act.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let mut gates = vec![0.0; self.feature_dim()];
        for m in 0..self.markers {
            let hidden: Vec<f64> = (0..hid)
                .map(|j| {
                    let o = m * hid + j;
                    let z: f64 = (0..k).map(|i| blk.se1_w[o * k + i] * mean[m * k + i]).sum();
                    relu(z + blk.se1_b[o])
                })
                .collect();
            for i in 0..k {
                let o = m * k + i;
                let z: f64 = (0..hid).map(|j| blk.se2_w[o * hid + j] * hidden[j]).sum::<f64>() + blk.se2_b[o];
                gates[o] = 1.0 / (1.0 + (-z).exp());
            }
        }
        gates
    }

    /// Classifier pre-activation hidden units and logits for pooled features.
    pub fn head_forward(&self, pooled: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let Some(head) = &self.head else {
            return config_err("model has no classifier head");
        };
        let d = pooled.len();
        let hidden: Vec<f64> = (0..head.hidden)
            .map(|j| head.fc1_b[j] + (0..d).map(|i| head.fc1_w[j * d + i] * pooled[i]).sum::<f64>())
            .collect();
        let logits = (0..head.classes)
            .map(|o| {
                head.fc2_b[o] + (0..head.hidden).map(|j| head.fc2_w[o * head.hidden + j] * relu(hidden[j])).sum::<f64>()
            })
            .collect();
        Ok((hidden, logits))
    }
}

/// Per-channel 3×3 convolution with zero padding 1.
pub(crate) fn depthwise(x: &[f64], w: &[f64], b: &[f64], d: usize, h: usize, wd: usize) -> Vec<f64> {
    let hw = h * wd;
    let mut out = vec![0.0; d * hw];
    for ch in 0..d {
        let src = &x[ch * hw..(ch + 1) * hw];
        let k = &w[ch * 9..(ch + 1) * 9];
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[ch];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        acc += k[ky * 3 + kx] * src[iy as usize * wd + ix as usize];
                    }
                }
                out[ch * hw + y * wd + xx] = acc;
            }
        }
    }
    out
}
