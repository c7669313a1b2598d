//! Raw forward/backward kernels shared by the autodiff graph and the
//! relevance propagation code. All kernels are stride-1 NCHW.

use rayon::prelude::*;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::Tensor;

/// Static description of a grouped 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn infer(
        input: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        groups: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, cin_g, kh, kw) = weight.dims4()?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return config_err(format!(
                "groups={groups} must divide in_channels={cin} and out_channels={cout}"
            ));
        }
        if cin / groups != cin_g {
            return dim_err(format!(
                "weight expects {cin_g} input channels per group, input provides {}",
                cin / groups
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return dim_err(format!("bias shape {:?} != [{cout}]", b.shape()));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return dim_err(format!(
                "kernel {kh}x{kw} with padding {padding} does not fit input {h}x{w}"
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            groups,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        self.h + 2 * self.padding - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.padding - self.kw + 1
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Input channel index for local input `icl` of output channel `oc`.
    #[inline]
    pub fn input_channel(&self, oc: usize, icl: usize) -> usize {
        (oc / self.cout_per_group()) * self.cin_per_group() + icl
    }

    /// Output positions `lo..hi` along an axis whose taps at offset `k` stay in bounds.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k);
        let hi = (extent + self.padding).saturating_sub(k).min(out_extent);
        (lo, hi.max(lo))
    }

    pub fn row_range(&self, ky: usize) -> (usize, usize) {
        self.valid(ky, self.h, self.out_h())
    }

    pub fn col_range(&self, kx: usize) -> (usize, usize) {
        self.valid(kx, self.w, self.out_w())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Sum of `f(x)` over a slice with eight independent accumulators.
#[inline]
fn lane_sum(a: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v)).sum();
    for c in chunks {
        for i in 0..8 {
            acc[i] += f(c[i]);
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `Σ a_i (b_i − shift)` with eight independent accumulators.
#[inline]
fn centered_dot(a: &[f64], b: &[f64], shift: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * (y - shift)).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * (y[i] - shift);
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Zero-padded copy of `planes` input planes, each stored with row stride
/// `w + 2p` and enough slack that every tap can read `out_h` full padded rows.
struct Padded {
    data: Vec<f64>,
    stride: usize,
    plane: usize,
}

impl ConvGeom {
    fn padded_width(&self) -> usize {
        self.w + 2 * self.padding
    }

    /// Length of one tap's flat run in the padded layout.
    fn run_len(&self) -> usize {
        self.out_h() * self.padded_width()
    }

    #[inline]
    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.padded_width() + kx
    }

    fn pad_input(&self, x: &[f64]) -> Padded {
        let wp = self.padded_width();
        let plane = (self.h + 2 * self.padding) * wp + self.kw - 1;
        let mut data = vec![0.0; self.cin * plane];
        for (src, dst) in x.chunks(self.h * self.w).zip(data.chunks_mut(plane)) {
            for (y, row) in src.chunks(self.w).enumerate() {
                let at = (y + self.padding) * wp + self.padding;
                dst[at..at + self.w].copy_from_slice(row);
            }
        }
        Padded { data, stride: wp, plane }
    }

    /// Output-shaped planes re-laid with the padded row stride; the extra
    /// columns are zero.
    fn widen_output(&self, go: &[f64]) -> Vec<f64> {
        let (ow, run, wp) = (self.out_w(), self.run_len(), self.padded_width());
        let mut out = vec![0.0; self.cout * run];
        for (src, dst) in go.chunks(self.out_h() * ow).zip(out.chunks_mut(run)) {
            for (y, row) in src.chunks(ow).enumerate() {
                dst[y * wp..y * wp + ow].copy_from_slice(row);
            }
        }
        out
    }
}

/// Grouped convolution forward pass for one sample.
fn conv_forward_sample(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (ow, run) = (g.out_w(), g.run_len());
    let plane = g.out_h() * ow;
    let cin_g = g.cin_per_group();
    let ksz = g.kh * g.kw;
    let xp = g.pad_input(input);
    let mut acc = vec![0.0; run];
    for oc in 0..g.cout {
        acc.fill(bias.map_or(0.0, |b| b[oc]));
        for icl in 0..cin_g {
            let base = g.input_channel(oc, icl) * xp.plane;
            let wk = &weight[(oc * cin_g + icl) * ksz..(oc * cin_g + icl + 1) * ksz];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    if wv != 0.0 {
                        let at = base + g.tap_offset(ky, kx);
                        axpy(wv, &xp.data[at..at + run], &mut acc);
                    }
                }
            }
        }
        let o = &mut out[oc * plane..(oc + 1) * plane];
        for (row, src) in o.chunks_mut(ow).zip(acc.chunks(xp.stride)) {
            row.copy_from_slice(&src[..ow]);
        }
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    groups: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::infer(input, weight, bias, groups, padding)?;
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * g.out_h() * g.out_w();
    let mut out = vec![0.0; g.n * out_stride];
    let (x, w) = (input.data(), weight.data());
    let b = bias.map(|b| b.data());
    out.par_chunks_mut(out_stride.max(1))
        .enumerate()
        .for_each(|(s, o)| conv_forward_sample(&g, &x[s * in_stride..(s + 1) * in_stride], w, b, o));
    Tensor::new(&[g.n, g.cout, g.out_h(), g.out_w()], out)
}

/// Input and weight gradients of one sample.
fn conv_backward_sample(g: &ConvGeom, x: &[f64], w: &[f64], go: &[f64], gin: &mut [f64], gw: &mut [f64]) {
    let run = g.run_len();
    let cin_g = g.cin_per_group();
    let ksz = g.kh * g.kw;
    let xp = g.pad_input(x);
    let gop = g.widen_output(go);
    let mut gp = vec![0.0; xp.data.len()];
    for oc in 0..g.cout {
        let o = &gop[oc * run..(oc + 1) * run];
        for icl in 0..cin_g {
            let base = g.input_channel(oc, icl) * xp.plane;
            let k0 = (oc * cin_g + icl) * ksz;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let at = base + g.tap_offset(ky, kx);
                    let k = k0 + ky * g.kw + kx;
                    gw[k] = dot(o, &xp.data[at..at + run]);
                    if w[k] != 0.0 {
                        axpy(w[k], o, &mut gp[at..at + run]);
                    }
                }
            }
        }
    }
    for (dst, src) in gin.chunks_mut(g.h * g.w).zip(gp.chunks(xp.plane)) {
        for (y, row) in dst.chunks_mut(g.w).enumerate() {
            let at = (y + g.padding) * xp.stride + g.padding;
            row.copy_from_slice(&src[at..at + g.w]);
        }
    }
}

/// Gradients of a grouped convolution with respect to input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let plane = g.out_h() * g.out_w();
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * plane;
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let wlen = w.len();

    // per-sample weight gradients are summed afterwards in sample order so
    // the result does not depend on scheduling
    let mut gin = vec![0.0; g.n * in_stride];
    let mut gw_parts = vec![0.0; g.n * wlen];
    gin.par_chunks_mut(in_stride.max(1))
        .zip(gw_parts.par_chunks_mut(wlen.max(1)))
        .enumerate()
        .for_each(|(s, (gi, gws))| {
            conv_backward_sample(
                g,
                &x[s * in_stride..(s + 1) * in_stride],
                w,
                &go[s * out_stride..(s + 1) * out_stride],
                gi,
                gws,
            )
        });
    let mut gw = vec![0.0; wlen];
    for part in gw_parts.chunks(wlen.max(1)) {
        axpy(1.0, part, &mut gw);
    }

    let mut gb = vec![0.0; g.cout];
    for (oc, b) in gb.iter_mut().enumerate() {
        for s in 0..g.n {
            *b += go[s * out_stride + oc * plane..s * out_stride + (oc + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }

    (
        Tensor::new(input.shape(), gin).expect("input grad shape"),
        Tensor::new(weight.shape(), gw).expect("weight grad shape"),
        Tensor::new(&[g.cout], gb).expect("bias grad shape"),
    )
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

pub(crate) struct BnSaved {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn bn_check(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err(format!(
            "batchnorm affine params {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    if !(eps > 0.0) {
        return config_err(format!("batchnorm eps must be > 0, got {eps}"));
    }
    Ok((n, c, h * w))
}

/// Training-mode batch normalization with batch statistics.
pub(crate) fn batchnorm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnSaved, BatchStats)> {
    let (n, c, hw) = bn_check(input, gamma, beta, eps)?;
    let m = (n * hw) as f64;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    let mut stats = BatchStats {
        mean: vec![0.0; c],
        var_unbiased: vec![0.0; c],
    };
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            sum += lane_sum(&x[(s * c + ch) * hw..(s * c + ch + 1) * hw], |v| v);
        }
        let mean = sum / m;
        let mut ss = 0.0;
        for s in 0..n {
            ss += lane_sum(&x[(s * c + ch) * hw..(s * c + ch + 1) * hw], |v| (v - mean) * (v - mean));
        }
        let var = ss / m;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ch] = is;
        stats.mean[ch] = mean;
        stats.var_unbiased[ch] = if m > 1.0 { ss / (m - 1.0) } else { 0.0 };
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for s in 0..n {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for i in r {
                out[i] = gm * (x[i] - mean) * is + bt;
            }
        }
    }
    let saved = BnSaved {
        mean: stats.mean.clone(),
        inv_std,
    };
    Ok((Tensor::new(input.shape(), out)?, saved, stats))
}

/// Evaluation-mode batch normalization with frozen running statistics.
pub(crate) fn batchnorm_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnSaved)> {
    let (n, c, hw) = bn_check(input, gamma, beta, eps)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return dim_err("running statistics do not match channel count");
    }
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mean = running_mean.data()[ch];
        let is = 1.0 / (running_var.data()[ch] + eps).sqrt();
        inv_std[ch] = is;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for s in 0..n {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                out[i] = gm * (x[i] - mean) * is + bt;
            }
        }
    }
    let saved = BnSaved {
        mean: running_mean.data().to_vec(),
        inv_std,
    };
    Ok((Tensor::new(input.shape(), out)?, saved))
}

/// Backward of batch normalization. In training mode the batch statistics
/// depend on the input; in evaluation mode they are constants.
pub(crate) fn batchnorm_backward(
    input: &Tensor,
    saved: &BnSaved,
    gamma: &Tensor,
    grad_out: &Tensor,
    train: bool,
) -> (Tensor, Tensor, Tensor) {
    let shape = input.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let (x, go) = (input.data(), grad_out.data());
    let mut gx = vec![0.0; go.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let (mean, is) = (saved.mean[ch], saved.inv_std[ch]);
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for s in 0..n {
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            sdy += lane_sum(&go[r.clone()], |v| v);
            sdyx += centered_dot(&go[r.clone()], &x[r], mean);
        }
        sdyx *= is;
        gg[ch] = sdyx;
        gb[ch] = sdy;
        let k = gamma.data()[ch] * is;
        for s in 0..n {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                gx[i] = if train {
                    k * (go[i] - sdy / m - (x[i] - mean) * is * sdyx / m)
                } else {
                    k * go[i]
                };
            }
        }
    }
    (
        Tensor::new(shape, gx).expect("bn grad shape"),
        Tensor::new(&[c], gg).expect("bn gamma grad"),
        Tensor::new(&[c], gb).expect("bn beta grad"),
    )
}
