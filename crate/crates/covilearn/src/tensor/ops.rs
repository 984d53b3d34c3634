//! Forward kernels for the layer operations, plus the matching backward
//! (vector-Jacobian) kernels used by the gradient tape.
//!
//! Conventions, fixed once so every caller and test agrees:
//! - `conv2d` is cross-correlation (no kernel flip).
//! - `Same` padding pads symmetrically with the extra cell at the bottom/right
//!   when the total is odd.
//! - Logs clamp their argument to `>= 1e-7`.
//! - `relu` takes derivative 0 at the origin; `max_pool2d` routes gradient to
//!   the first maximum in scan order on ties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to every log argument.
pub const LOG_CLAMP_MIN: f64 = 1e-7;

/// Spatial padding for convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Output extent `ceil(H / stride)`; pads symmetrically, extra cell at
    /// the bottom/right when the total is odd. Equal extents at stride 1.
    Same,
    /// Fixed padding on every border.
    Explicit(usize),
}

impl Padding {
    /// (before, after) padding for one spatial axis.
    fn amounts(self, extent: usize, window: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Explicit(p) => (p, p),
            Padding::Same => {
                let out = extent.div_ceil(stride);
                let total = ((out - 1) * stride + window).saturating_sub(extent);
                (total / 2, total - total / 2)
            }
        }
    }
}

/// (before, after) padding a [`Padding`] policy adds on one spatial axis.
pub fn padding_extents(
    padding: Padding,
    extent: usize,
    window: usize,
    stride: usize,
) -> (usize, usize) {
    padding.amounts(extent, window, stride)
}

fn out_extent(padded: usize, window: usize, stride: usize) -> usize {
    (padded - window) / stride + 1
}

/// Zero-pads the spatial axes of an `[N,C,H,W]` tensor.
fn pad_spatial(input: &Tensor, pt: usize, pb: usize, pl: usize, pr: usize) -> Tensor {
    if pt == 0 && pb == 0 && pl == 0 && pr == 0 {
        return input.clone();
    }
    let (n, c, h, w) = input.dims4("pad").expect("pad_spatial takes rank-4 input");
    let (hp, wp) = (h + pt + pb, w + pl + pr);
    let mut out = Tensor::zeros(vec![n, c, hp, wp]);
    let src = input.data();
    let dst = out.data_mut();
    for img in 0..n * c {
        for y in 0..h {
            let s = img * h * w + y * w;
            let d = img * hp * wp + (y + pt) * wp + pl;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Drops the padding added by [`pad_spatial`].
fn crop_spatial(padded: &Tensor, pt: usize, pl: usize, h: usize, w: usize) -> Tensor {
    let (n, c, _hp, wp) = padded.dims4("crop").expect("crop_spatial takes rank-4 input");
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    let src = padded.data();
    let hp = padded.shape()[2];
    let dst = out.data_mut();
    for img in 0..n * c {
        for y in 0..h {
            let s = img * hp * wp + (y + pt) * wp + pl;
            let d = img * h * w + y * w;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

fn conv_checks(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if stride == 0 {
        return Err(Error::argument("conv2d stride must be positive"));
    }
    let (n, c, h, w) = input.dims4("conv2d input")?;
    let (f, kc, kh, kw) = kernel.dims4("conv2d kernel")?;
    if kc != c {
        return Err(Error::dimension(format!(
            "conv2d kernel expects {kc} input channels but input has {c}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::dimension(format!(
                "conv2d bias shape {:?} does not match {f} filters",
                b.shape()
            )));
        }
    }
    Ok((n, c, h, w, f, kh, kw))
}

/// 2-D cross-correlation over an `[N,C,H,W]` input with an `[F,C,kh,kw]`
/// kernel. Output extent per axis is `floor((H + pad - kh)/stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c, h, w, f, kh, kw) = conv_checks(input, kernel, bias, stride)?;
    let (pt, pb) = padding.amounts(h, kh, stride);
    let (pl, pr) = padding.amounts(w, kw, stride);
    let (hp, wp) = (h + pt + pb, w + pl + pr);
    if kh > hp || kw > wp {
        return Err(Error::dimension(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}"
        )));
    }
    let padded = pad_spatial(input, pt, pb, pl, pr);
    let (ho, wo) = (out_extent(hp, kh, stride), out_extent(wp, kw, stride));

    let mut out = Tensor::zeros(vec![n, f, ho, wo]);
    let src = padded.data();
    let ker = kernel.data();
    let plane = ho * wo;
    let run_plane = |idx: usize, dst: &mut [f64]| {
        let (img, filt) = (idx / f, idx % f);
        let b = bias.map_or(0.0, |b| b.data()[filt]);
        for oy in 0..ho {
            for ox in 0..wo {
                let (iy, ix) = (oy * stride, ox * stride);
                let mut acc = 0.0;
                for ch in 0..c {
                    let sbase = ((img * c + ch) * hp + iy) * wp + ix;
                    let kbase = ((filt * c + ch) * kh) * kw;
                    for ky in 0..kh {
                        let srow = &src[sbase + ky * wp..sbase + ky * wp + kw];
                        let krow = &ker[kbase + ky * kw..kbase + ky * kw + kw];
                        for (sv, kv) in srow.iter().zip(krow) {
                            acc += sv * kv;
                        }
                    }
                }
                dst[oy * wo + ox] = acc + b;
            }
        }
    };
    // Each output plane is independent, so splitting across threads cannot
    // change summation order or results.
    let work = n * f * plane * c * kh * kw;
    if work > 1 << 20 {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| run_plane(idx, dst));
    } else {
        for (idx, dst) in out.data_mut().chunks_mut(plane).enumerate() {
            run_plane(idx, dst);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, c, h, w, f, kh, kw) = conv_checks(input, kernel, None, stride)?;
    let (pt, pb) = padding.amounts(h, kh, stride);
    let (pl, pr) = padding.amounts(w, kw, stride);
    let padded = pad_spatial(input, pt, pb, pl, pr);
    let (_, _, hp, wp) = padded.dims4("conv2d padded input")?;
    let (_, _, ho, wo) = grad_out.dims4("conv2d grad")?;

    let go = grad_out.data();
    let src = padded.data();
    let ker = kernel.data();

    let mut d_kernel = Tensor::zeros(vec![f, c, kh, kw]);
    let mut d_bias = Tensor::zeros(vec![f]);
    let mut d_padded = Tensor::zeros(vec![n, c, hp, wp]);

    {
        let dk = d_kernel.data_mut();
        let db = d_bias.data_mut();
        let dp = d_padded.data_mut();
        for img in 0..n {
            for filt in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = go[((img * f + filt) * ho + oy) * wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        db[filt] += g;
                        let (iy, ix) = (oy * stride, ox * stride);
                        for ch in 0..c {
                            let sbase = ((img * c + ch) * hp + iy) * wp + ix;
                            let kbase = ((filt * c + ch) * kh) * kw;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let sv = src[sbase + ky * wp + kx];
                                    dk[kbase + ky * kw + kx] += g * sv;
                                    if need_input_grad {
                                        dp[sbase + ky * wp + kx] += g * ker[kbase + ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let d_input = need_input_grad.then(|| crop_spatial(&d_padded, pt, pl, h, w));
    Ok((d_input, d_kernel, d_bias))
}

fn batchnorm_checks(input: &Tensor, stats: [&Tensor; 4], eps: f64) -> Result<usize> {
    let (_, c, _, _) = input.dims4("batchnorm input")?;
    for (name, t) in ["gamma", "beta", "mean", "var"].iter().zip(stats) {
        if t.shape() != [c] {
            return Err(Error::dimension(format!(
                "batchnorm {name} shape {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    if eps <= 0.0 {
        return Err(Error::argument("batchnorm eps must be positive"));
    }
    if let Some(v) = stats[3].data().iter().find(|v| **v < 0.0) {
        return Err(Error::argument(format!(
            "batchnorm variance must be non-negative, found {v}"
        )));
    }
    Ok(c)
}

/// Per-channel affine normalization with stored statistics:
/// `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let c = batchnorm_checks(input, [gamma, beta, mean, var], eps)?;
    let (n, _, h, w) = input.dims4("batchnorm input")?;
    let mut out = input.clone();
    let dst = out.data_mut();
    let plane = h * w;
    for img in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] / (var.data()[ch] + eps).sqrt();
            let shift = beta.data()[ch] - mean.data()[ch] * scale;
            let base = (img * c + ch) * plane;
            for v in &mut dst[base..base + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`batchnorm_infer`] for the input and the learnable
/// `gamma`/`beta`; stored statistics are constants.
pub fn batchnorm_infer_backward(
    input: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4("batchnorm input")?;
    let plane = h * w;
    let mut d_input = Tensor::zeros(vec![n, c, h, w]);
    let mut d_gamma = Tensor::zeros(vec![c]);
    let mut d_beta = Tensor::zeros(vec![c]);
    let (src, go) = (input.data(), grad_out.data());
    {
        let (di, dg, db) = (d_input.data_mut(), d_gamma.data_mut(), d_beta.data_mut());
        for img in 0..n {
            for ch in 0..c {
                let inv_std = 1.0 / (var.data()[ch] + eps).sqrt();
                let g = gamma.data()[ch];
                let m = mean.data()[ch];
                let base = (img * c + ch) * plane;
                for i in base..base + plane {
                    di[i] = go[i] * g * inv_std;
                    dg[ch] += go[i] * (src[i] - m) * inv_std;
                    db[ch] += go[i];
                }
            }
        }
    }
    Ok((d_input, d_gamma, d_beta))
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut out = grad_out.clone();
    for (g, x) in out.data_mut().iter_mut().zip(input.data()) {
        if *x <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Windowed maximum per channel. Spec surface: no padding.
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(max_pool2d_padded(input, window, stride, 0)?.0)
}

/// Max pooling over in-bounds cells only: padded border cells are ignored
/// rather than compared. An axis shorter than the window yields a single
/// edge-truncated window spanning the whole axis; a window exceeding both
/// padded axes is an error. Also returns the flat input index of each
/// selected maximum (first maximum in scan order on ties) for the backward
/// pass.
pub fn max_pool2d_padded(
    input: &Tensor,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 || stride == 0 {
        return Err(Error::argument("max_pool2d window and stride must be positive"));
    }
    let (n, c, h, w) = input.dims4("max_pool2d input")?;
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if window > hp && window > wp {
        return Err(Error::argument(format!(
            "max_pool2d window {window} exceeds padded input {hp}x{wp}"
        )));
    }
    let ho = if hp >= window { out_extent(hp, window, stride) } else { 1 };
    let wo = if wp >= window { out_extent(wp, window, stride) } else { 1 };
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let src = input.data();
    let dst = out.data_mut();
    for img in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..window {
                    let y = (oy * stride + ky).wrapping_sub(padding);
                    if y >= h {
                        continue;
                    }
                    for kx in 0..window {
                        let x = (ox * stride + kx).wrapping_sub(padding);
                        if x >= w {
                            continue;
                        }
                        let idx = img * h * w + y * w + x;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                debug_assert!(best_idx != usize::MAX, "window fully outside input");
                let o = img * ho * wo + oy * wo + ox;
                dst[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(input_shape.to_vec());
    let dst = d.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        dst[idx] += g;
    }
    d
}

/// Windowed mean per channel, no padding.
pub fn avg_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    if window == 0 || stride == 0 {
        return Err(Error::argument("avg_pool2d window and stride must be positive"));
    }
    let (n, c, h, w) = input.dims4("avg_pool2d input")?;
    if window > h || window > w {
        return Err(Error::argument(format!(
            "avg_pool2d window {window} exceeds input {h}x{w}"
        )));
    }
    let (ho, wo) = (out_extent(h, window, stride), out_extent(w, window, stride));
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let src = input.data();
    let dst = out.data_mut();
    let norm = 1.0 / (window * window) as f64;
    for img in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..window {
                    for kx in 0..window {
                        acc += src[img * h * w + (oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                dst[img * ho * wo + oy * wo + ox] = acc * norm;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    grad_out: &Tensor,
) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (_, _, ho, wo) = grad_out.dims4("avg_pool2d grad").expect("rank-4 grad");
    let planes = input_shape[0] * input_shape[1];
    let mut d = Tensor::zeros(input_shape.to_vec());
    let dst = d.data_mut();
    let go = grad_out.data();
    let norm = 1.0 / (window * window) as f64;
    for img in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = go[img * ho * wo + oy * wo + ox] * norm;
                for ky in 0..window {
                    for kx in 0..window {
                        dst[img * h * w + (oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    d
}

/// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avg_pool input")?;
    let plane = h * w;
    let mut out = Tensor::zeros(vec![n, c]);
    let src = input.data();
    let dst = out.data_mut();
    for (i, v) in dst.iter_mut().enumerate() {
        let base = i * plane;
        *v = src[base..base + plane].iter().sum::<f64>() / plane as f64;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let mut d = Tensor::zeros(input_shape.to_vec());
    let dst = d.data_mut();
    for (i, g) in grad_out.data().iter().enumerate() {
        let share = g / plane as f64;
        for v in &mut dst[i * plane..(i + 1) * plane] {
            *v = share;
        }
    }
    d
}

/// Channel-axis concatenation of `[N,Ci,H,W]` tensors sharing N, H, W.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::argument("concat_channels needs at least one input"))?;
    let (n, _, h, w) = first.dims4("concat_channels input")?;
    let mut channels = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4("concat_channels input")?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::dimension(format!(
                "concat_channels inputs disagree: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        channels += tc;
    }
    let plane = h * w;
    let mut out = Tensor::zeros(vec![n, channels, h, w]);
    let dst = out.data_mut();
    for img in 0..n {
        let mut at = img * channels * plane;
        for t in inputs {
            let tc = t.shape()[1];
            let src = &t.data()[img * tc * plane..(img + 1) * tc * plane];
            dst[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
    }
    Ok(out)
}

/// Splits a concat gradient back into the per-input pieces.
pub fn concat_channels_backward(input_shapes: &[Vec<usize>], grad_out: &Tensor) -> Vec<Tensor> {
    let (n, _, h, w) = grad_out.dims4("concat grad").expect("rank-4 grad");
    let plane = h * w;
    let total: usize = input_shapes.iter().map(|s| s[1]).sum();
    let go = grad_out.data();
    let mut grads: Vec<Tensor> = input_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
    for img in 0..n {
        let mut at = img * total * plane;
        for (shape, grad) in input_shapes.iter().zip(&mut grads) {
            let span = shape[1] * plane;
            let dst = &mut grad.data_mut()[img * span..(img + 1) * span];
            dst.copy_from_slice(&go[at..at + span]);
            at += span;
        }
    }
    grads
}

/// Elementwise sum of two same-shape tensors (residual shortcut).
pub fn add(lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    if lhs.shape() != rhs.shape() {
        return Err(Error::dimension(format!(
            "add shapes differ: {:?} vs {:?}",
            lhs.shape(),
            rhs.shape()
        )));
    }
    let mut out = lhs.clone();
    for (o, r) in out.data_mut().iter_mut().zip(rhs.data()) {
        *o += r;
    }
    Ok(out)
}

/// `out = input * weight + bias` with `input [N,D]`, `weight [D,K]`, `bias [K]`.
pub fn dense_affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = input.dims2("dense_affine input")?;
    let (wd, k) = weight.dims2("dense_affine weight")?;
    if wd != d {
        return Err(Error::dimension(format!(
            "dense_affine inner dimensions disagree: input [.,{d}] vs weight [{wd},.]"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::dimension(format!(
            "dense_affine bias shape {:?} does not match {k} outputs",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![n, k]);
    let (x, wv, b) = (input.data(), weight.data(), bias.data());
    let dst = out.data_mut();
    for row in 0..n {
        for col in 0..k {
            let mut acc = b[col];
            for i in 0..d {
                acc += x[row * d + i] * wv[i * k + col];
            }
            dst[row * k + col] = acc;
        }
    }
    Ok(out)
}

pub fn dense_affine_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = input.dims2("dense input").expect("rank-2");
    let (_, k) = weight.dims2("dense weight").expect("rank-2");
    let (x, wv, go) = (input.data(), weight.data(), grad_out.data());
    let mut d_input = Tensor::zeros(vec![n, d]);
    let mut d_weight = Tensor::zeros(vec![d, k]);
    let mut d_bias = Tensor::zeros(vec![k]);
    {
        let (di, dw, db) = (d_input.data_mut(), d_weight.data_mut(), d_bias.data_mut());
        for row in 0..n {
            for col in 0..k {
                let g = go[row * k + col];
                db[col] += g;
                for i in 0..d {
                    di[row * d + i] += g * wv[i * k + col];
                    dw[i * k + col] += g * x[row * d + i];
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Row-major reshape to `[N, D]` keeping the batch axis.
pub fn flatten(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::dimension(format!(
            "flatten expects a batched tensor, got shape {:?}",
            input.shape()
        )));
    }
    let n = input.shape()[0];
    let d: usize = input.shape()[1..].iter().product();
    input.reshape(vec![n, d])
}

/// Whether dropout draws masks or passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Infer,
}

/// Inverted dropout: in train mode zeroes each element with probability
/// `rate` and scales survivors by `1/(1-rate)`; identity in infer mode.
/// Deterministic for a fixed seed.
pub fn dropout(input: &Tensor, rate: f64, mode: DropoutMode, seed: u64) -> Result<Tensor> {
    let mask = dropout_mask(input.len(), rate, mode, seed)?;
    match mask {
        None => Ok(input.clone()),
        Some(mask) => {
            let mut out = input.clone();
            for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            Ok(out)
        }
    }
}

/// The scaled keep/drop mask behind [`dropout`]; `None` when the op is the
/// identity (infer mode or rate 0).
pub fn dropout_mask(
    len: usize,
    rate: f64,
    mode: DropoutMode,
    seed: u64,
) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::argument(format!(
            "dropout rate must lie in [0,1), got {rate}"
        )));
    }
    if mode == DropoutMode::Infer || rate == 0.0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (1.0 - rate);
    let mask = (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    Ok(Some(mask))
}

/// Row-wise softmax over `[N,K]` logits, computed with max-subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2("softmax logits")?;
    if !logits.is_all_finite() {
        return Err(Error::argument("softmax logits must be finite"));
    }
    let mut out = logits.clone();
    let dst = out.data_mut();
    for row in 0..n {
        let slice = &mut dst[row * k..(row + 1) * k];
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in slice.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in slice.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// VJP of softmax given its output probabilities.
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let (n, k) = probs.dims2("softmax probs").expect("rank-2");
    let (p, go) = (probs.data(), grad_out.data());
    let mut d = Tensor::zeros(vec![n, k]);
    let dst = d.data_mut();
    for row in 0..n {
        let base = row * k;
        let dot: f64 = (0..k).map(|j| go[base + j] * p[base + j]).sum();
        for j in 0..k {
            dst[base + j] = p[base + j] * (go[base + j] - dot);
        }
    }
    d
}

fn bce_checks(predicted: &Tensor, target: &Tensor) -> Result<(usize, usize)> {
    let (n, k) = predicted.dims2("bce_loss predictions")?;
    if target.shape() != predicted.shape() {
        return Err(Error::dimension(format!(
            "bce_loss target shape {:?} does not match predictions {:?}",
            target.shape(),
            predicted.shape()
        )));
    }
    if !predicted.is_all_finite() || !target.is_all_finite() {
        return Err(Error::argument("bce_loss inputs must be finite"));
    }
    for row in 0..n {
        let p = &predicted.data()[row * k..(row + 1) * k];
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::argument(format!(
                "bce_loss prediction row {row} sums to {sum}, expected 1 within 1e-6"
            )));
        }
        let t = &target.data()[row * k..(row + 1) * k];
        let ones = t.iter().filter(|v| **v == 1.0).count();
        if ones != 1 || t.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::argument(format!(
                "bce_loss target row {row} is not one-hot: {t:?}"
            )));
        }
    }
    Ok((n, k))
}

/// Mean over the batch of `-sum_k y_k * ln(clamp(p_k, 1e-7, 1))`.
pub fn bce_loss(predicted: &Tensor, target: &Tensor) -> Result<f64> {
    let (n, k) = bce_checks(predicted, target)?;
    let (p, y) = (predicted.data(), target.data());
    let mut total = 0.0;
    for i in 0..n * k {
        if y[i] != 0.0 {
            total -= y[i] * p[i].clamp(LOG_CLAMP_MIN, 1.0).ln();
        }
    }
    Ok(total / n as f64)
}

/// Gradient of [`bce_loss`] with respect to the predictions. Zero where the
/// clamp is active.
pub fn bce_loss_backward(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (n, k) = bce_checks(predicted, target)?;
    let (p, y) = (predicted.data(), target.data());
    let mut d = Tensor::zeros(vec![n, k]);
    let dst = d.data_mut();
    let scale = 1.0 / n as f64;
    for i in 0..n * k {
        if y[i] != 0.0 && (LOG_CLAMP_MIN..=1.0).contains(&p[i]) {
            dst[i] = -y[i] / p[i] * scale;
        }
    }
    Ok(d)
}
