//! Reverse-mode differentiation over a tape of dense tensor primitives.
//!
//! Every primitive is evaluated eagerly when it is recorded; [`Graph::backward`]
//! then walks the tape once in reverse. Only the operations used by the
//! channel-independent encoder, the early-fusion baseline and the training
//! objectives are provided.

pub mod gradcheck;
pub mod kernels;

use crate::error::{dim_err, CimError, Result};
use crate::eval::loss::weighted_cross_entropy;
use crate::ssl::losses::{nt_xent, vicreg, VicregWeights};
use crate::tensor::Tensor;

pub use kernels::BatchStats;
use kernels::{BnSaved, ConvGeom};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalization statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics; the op reports them for running updates.
    Train,
    /// Normalize with frozen running statistics.
    Eval {
        running_mean: &'a Tensor,
        running_var: &'a Tensor,
    },
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        coeffs: Tensor,
    },
    /// Scalar loss whose gradients were computed during the forward pass.
    Loss {
        inputs: Vec<(Var, Tensor)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the leaves of the graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        // Intermediate activations are not scanned; a non-finite value there
        // surfaces in the scalar outputs or in the leaf gradients.
        let checked = matches!(op, Op::Leaf | Op::Sum(_) | Op::WeightedSum { .. } | Op::Loss { .. });
        if checked && !value.is_finite() {
            return Err(CimError::NonFinite(format!(
                "forward value of node {} is not finite",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize, padding: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        let geom = ConvGeom::infer(xv, wv, bv, groups, padding)?;
        let out = kernels::conv2d_forward(xv, wv, bv, groups, padding)?;
        self.push(out, Op::Conv { x, w, b, geom })
    }

    /// Batch normalization over N×H×W per channel. Returns the batch statistics in
    /// training mode so the caller can update running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        match mode {
            BnMode::Train => {
                let (out, saved, stats) = kernels::batchnorm_train(xv, gv, bv, eps)?;
                let v = self.push(
                    out,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        saved,
                        train: true,
                    },
                )?;
                Ok((v, Some(stats)))
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                let (out, saved) =
                    kernels::batchnorm_eval(xv, gv, bv, running_mean, running_var, eps)?;
                let v = self.push(
                    out,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        saved,
                        train: false,
                    },
                )?;
                Ok((v, None))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool(self.value(x))?;
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// `y = x Wᵀ + b` for `x: [N, Din]`, `W: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.axpy(1.0, bv)?;
        self.push(out, Op::Add(a, b))
    }

    /// Multiply each `[H, W]` plane of `x: [N, C, H, W]` by `s: [N, C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (n, c, h, w) = xv.dims4()?;
        if sv.shape() != [n, c] {
            return dim_err(format!("scale_channels: scales {:?} for {n}x{c}", sv.shape()));
        }
        let hw = h * w;
        let mut out = xv.clone();
        for (plane, &k) in out.data_mut().chunks_mut(hw).zip(sv.data()) {
            plane.iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::ScaleChannels { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ coeffs_i · x_i` with fixed coefficients.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != coeffs.shape() {
            return dim_err("weighted_sum: coefficient shape mismatch");
        }
        let s = kernels::dot(xv.data(), coeffs.data());
        self.push(Tensor::scalar(s), Op::WeightedSum { x, coeffs })
    }

    pub fn nt_xent(&mut self, z: Var, temperature: f64) -> Result<Var> {
        let (loss, grad) = nt_xent(self.value(z), temperature)?;
        self.push(
            Tensor::scalar(loss),
            Op::Loss {
                inputs: vec![(z, grad)],
            },
        )
    }

    pub fn vicreg(&mut self, za: Var, zb: Var, weights: &VicregWeights) -> Result<Var> {
        let (terms, ga, gb) = vicreg(self.value(za), self.value(zb), weights)?;
        self.push(
            Tensor::scalar(terms.total),
            Op::Loss {
                inputs: vec![(za, ga), (zb, gb)],
            },
        )
    }

    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &Tensor) -> Result<Var> {
        let (loss, grad) = weighted_cross_entropy(self.value(logits), labels, weights)?;
        self.push(
            Tensor::scalar(loss),
            Op::Loss {
                inputs: vec![(logits, grad)],
            },
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return dim_err(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                g.ensure_finite("gradient")?;
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, t: Tensor| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geom } => {
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(geom, self.value(*x), self.value(*w), &g);
                    acc(*x, gx)?;
                    acc(*w, gw)?;
                    if let Some(b) = b {
                        acc(*b, gb)?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                    train,
                } => {
                    let (gx, gg, gb) = kernels::batchnorm_backward(
                        self.value(*x),
                        saved,
                        self.value(*gamma),
                        &g,
                        *train,
                    );
                    acc(*x, gx)?;
                    acc(*gamma, gg)?;
                    acc(*beta, gb)?;
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gi, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    acc(*x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gi, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gi *= y * (1.0 - y);
                    }
                    acc(*x, gx)?;
                }
                Op::GlobalAvgPool(x) => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let mut gx = Tensor::zeros(xv.shape());
                    for (plane, &gi) in gx.data_mut().chunks_mut(hw).zip(g.data()) {
                        plane.fill(gi / hw as f64);
                    }
                    acc(*x, gx)?;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, din) = xv.dims2()?;
                    let dout = wv.shape()[0];
                    let mut gx = vec![0.0; n * din];
                    let mut gw = vec![0.0; dout * din];
                    let mut gb = vec![0.0; dout];
                    for i in 0..n {
                        for o in 0..dout {
                            let go = g.data()[i * dout + o];
                            if go == 0.0 {
                                continue;
                            }
                            gb[o] += go;
                            for k in 0..din {
                                gx[i * din + k] += go * wv.data()[o * din + k];
                                gw[o * din + k] += go * xv.data()[i * din + k];
                            }
                        }
                    }
                    acc(*x, Tensor::new(&[n, din], gx)?)?;
                    acc(*w, Tensor::new(&[dout, din], gw)?)?;
                    if let Some(b) = b {
                        acc(*b, Tensor::new(&[dout], gb)?)?;
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(*x, g.reshape(&shape)?)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::ScaleChannels { x, s } => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let (_, _, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let mut gx = g;
                    let mut gs = vec![0.0; sv.len()];
                    for (p, (gplane, xplane)) in gx
                        .data_mut()
                        .chunks_mut(hw)
                        .zip(xv.data().chunks(hw))
                        .enumerate()
                    {
                        gs[p] = kernels::dot(gplane, xplane);
                        let k = sv.data()[p];
                        gplane.iter_mut().for_each(|v| *v *= k);
                    }
                    acc(*x, gx)?;
                    acc(*s, Tensor::new(sv.shape(), gs)?)?;
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(*x, Tensor::full(&shape, g.data()[0]))?;
                }
                Op::WeightedSum { x, coeffs } => {
                    acc(*x, coeffs.map(|c| c * g.data()[0]))?;
                }
                Op::Loss { inputs } => {
                    for (v, local) in inputs {
                        acc(*v, local.map(|c| c * g.data()[0]))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &t),
        slot @ None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
    Tensor::new(&[n, c], data)
}

pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, din) = x.dims2()?;
    let (dout, win) = w.dims2()?;
    if win != din {
        return dim_err(format!("linear: input width {din} vs weight {:?}", w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return dim_err(format!("linear: bias {:?} for {dout} outputs", b.shape()));
        }
    }
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let xi = &x.data()[i * din..(i + 1) * din];
        for o in 0..dout {
            out[i * dout + o] = kernels::dot(xi, &w.data()[o * din..(o + 1) * din])
                + b.map_or(0.0, |b| b.data()[o]);
        }
    }
    Tensor::new(&[n, dout], out)
}
