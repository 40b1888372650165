//! Numeric kernels shared by the autodiff tape and the direct inference path.
//!
//! All functions work on flat row-major `f32` slices with NCHW layout.
//! Every reduction runs in a fixed sequential order, so results are
//! bit-identical from run to run regardless of how callers schedule work.
//! Channel statistics (batch norm) and full-tensor sums accumulate in `f64`
//! before rounding back to `f32`; convolution inner products accumulate in
//! `f32` like every mainstream CPU implementation.

use crate::error::{Error, Result};

/// Geometry of one 2-d convolution. `pad` is the zero-padding applied on
/// every side; "same" convs at stride 1 use `pad = dilation * (k - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Padding that preserves spatial size at stride 1. Requires odd `k`.
    pub fn same_pad(k: usize, dilation: usize) -> usize {
        dilation * (k - 1) / 2
    }

    /// Span of the dilated kernel in input pixels.
    pub fn effective_extent(&self) -> usize {
        self.dilation * (self.k - 1) + 1
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.effective_extent()) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.effective_extent()) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.dilation == 0 || self.stride == 0 {
            return Err(Error::InvalidArg(
                "kernel size, dilation and stride must be positive".into(),
            ));
        }
        let ext = self.effective_extent();
        if self.h + 2 * self.pad < ext || self.w + 2 * self.pad < ext {
            return Err(Error::InvalidArg(format!(
                "dilated kernel extent {} exceeds padded input {}x{}; input must be at least {}x{}",
                ext,
                self.h + 2 * self.pad,
                self.w + 2 * self.pad,
                ext.saturating_sub(2 * self.pad),
                ext.saturating_sub(2 * self.pad),
            )));
        }
        Ok(())
    }
}

/// Direct 2-d convolution. One code path covers every dilation; dilation 1 is
/// plain dense convolution. Stride 1 takes a row-vectorized path, larger
/// strides fall back to a per-output-element loop.
pub fn conv2d_forward(
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    g: ConvGeom,
) -> Result<Vec<f32>> {
    g.validate()?;
    debug_assert_eq!(input.len(), g.batch * g.c_in * g.h * g.w);
    debug_assert_eq!(weight.len(), g.c_out * g.c_in * g.k * g.k);
    debug_assert_eq!(bias.len(), g.c_out);

    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0f32; g.batch * g.c_out * oh * ow];

    if g.stride == 1 {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                let plane = &mut out[(n * g.c_out + co) * oh * ow..][..oh * ow];
                plane.fill(bias[co]);
                for ci in 0..g.c_in {
                    let in_plane = &input[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.k {
                        let dy = (ky * g.dilation) as isize - g.pad as isize;
                        let oy_lo = (-dy).max(0) as usize;
                        let oy_hi = ((g.h as isize - dy).min(oh as isize)).max(0) as usize;
                        for kx in 0..g.k {
                            let wv = weight[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dx = (kx * g.dilation) as isize - g.pad as isize;
                            let ox_lo = (-dx).max(0) as usize;
                            let ox_hi = ((g.w as isize - dx).min(ow as isize)).max(0) as usize;
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = (oy as isize + dy) as usize;
                                let i0 = iy * g.w + (ox_lo as isize + dx) as usize;
                                let dst = &mut plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                let src = &in_plane[i0..i0 + (ox_hi - ox_lo)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                let iy = (oy * g.stride + ky * g.dilation) as isize
                                    - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..g.k {
                                    let ix = (ox * g.stride + kx * g.dilation) as isize
                                        - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += weight[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                        * input[((n * g.c_in + ci) * g.h + iy as usize) * g.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    g: ConvGeom,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut d_input = vec![0.0f32; g.batch * g.c_in * g.h * g.w];
    let mut d_weight = vec![0.0f32; g.c_out * g.c_in * g.k * g.k];
    let mut d_bias = vec![0.0f32; g.c_out];

    for co in 0..g.c_out {
        let mut acc = 0.0f64;
        for n in 0..g.batch {
            let plane = &grad_out[(n * g.c_out + co) * oh * ow..][..oh * ow];
            acc += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        d_bias[co] = acc as f32;
    }

    if g.stride == 1 {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                let go_plane = &grad_out[(n * g.c_out + co) * oh * ow..][..oh * ow];
                for ci in 0..g.c_in {
                    let in_plane = &input[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let di_plane = &mut d_input[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    for ky in 0..g.k {
                        let dy = (ky * g.dilation) as isize - g.pad as isize;
                        let oy_lo = (-dy).max(0) as usize;
                        let oy_hi = ((g.h as isize - dy).min(oh as isize)).max(0) as usize;
                        for kx in 0..g.k {
                            let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                            let wv = weight[widx];
                            let dx = (kx * g.dilation) as isize - g.pad as isize;
                            let ox_lo = (-dx).max(0) as usize;
                            let ox_hi = ((g.w as isize - dx).min(ow as isize)).max(0) as usize;
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let mut wacc = 0.0f32;
                            for oy in oy_lo..oy_hi {
                                let iy = (oy as isize + dy) as usize;
                                let i0 = iy * g.w + (ox_lo as isize + dx) as usize;
                                let go_row = &go_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                let in_row = &in_plane[i0..i0 + (ox_hi - ox_lo)];
                                let di_row = &mut di_plane[i0..i0 + (ox_hi - ox_lo)];
                                for ((go, iv), di) in
                                    go_row.iter().zip(in_row).zip(di_row.iter_mut())
                                {
                                    wacc += go * iv;
                                    *di += wv * go;
                                }
                            }
                            d_weight[widx] += wacc;
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = grad_out[((n * g.c_out + co) * oh + oy) * ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                let iy = (oy * g.stride + ky * g.dilation) as isize
                                    - g.pad as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..g.k {
                                    let ix = (ox * g.stride + kx * g.dilation) as isize
                                        - g.pad as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                                    let iidx = ((n * g.c_in + ci) * g.h + iy as usize) * g.w
                                        + ix as usize;
                                    d_weight[widx] += go * input[iidx];
                                    d_input[iidx] += go * weight[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(x: &[f32], grad_out: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &go)| if v > 0.0 { go } else { 0.0 })
        .collect()
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn sigmoid_backward(out: &[f32], grad_out: &[f32]) -> Vec<f32> {
    out.iter()
        .zip(grad_out)
        .map(|(&o, &go)| go * o * (1.0 - o))
        .collect()
}

/// 2x2 max pooling with stride 2. Returns the pooled values plus the flat
/// input index of each winner (first scanned wins ties) for backward routing.
pub fn maxpool2x2_forward(
    input: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<f32>, Vec<u32>)> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "maxpool2x2 requires even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    for p in 0..n * c {
        let in_plane = &input[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = in_plane[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if in_plane[idx] > best {
                        best = in_plane[idx];
                        best_idx = idx;
                    }
                }
                out[(p * oh + oy) * ow + ox] = best;
                argmax[(p * oh + oy) * ow + ox] = (p * h * w + best_idx) as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2x2_backward(grad_out: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut d_input = vec![0.0f32; input_len];
    for (go, &idx) in grad_out.iter().zip(argmax) {
        d_input[idx as usize] += go;
    }
    d_input
}

/// Nearest-neighbour 2x upsampling: each input pixel becomes a 2x2 block.
pub fn upsample2x_forward(input: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let in_plane = &input[p * h * w..][..h * w];
        let out_plane = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let iy = oy / 2;
            for ox in 0..ow {
                out_plane[oy * ow + ox] = in_plane[iy * w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(grad_out: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut d_input = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let go_plane = &grad_out[p * oh * ow..][..oh * ow];
        let di_plane = &mut d_input[p * h * w..][..h * w];
        for oy in 0..oh {
            let iy = oy / 2;
            for ox in 0..ow {
                di_plane[iy * w + ox / 2] += go_plane[oy * ow + ox];
            }
        }
    }
    d_input
}

/// Concatenate along the channel axis: `[N,C1,H,W] ++ [N,C2,H,W]`.
pub fn concat_channels_forward(
    a: &[f32],
    b: &[f32],
    n: usize,
    c_a: usize,
    c_b: usize,
    hw: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; n * (c_a + c_b) * hw];
    for i in 0..n {
        let dst = &mut out[i * (c_a + c_b) * hw..][..(c_a + c_b) * hw];
        dst[..c_a * hw].copy_from_slice(&a[i * c_a * hw..][..c_a * hw]);
        dst[c_a * hw..].copy_from_slice(&b[i * c_b * hw..][..c_b * hw]);
    }
    out
}

pub fn concat_channels_backward(
    grad_out: &[f32],
    n: usize,
    c_a: usize,
    c_b: usize,
    hw: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut da = vec![0.0f32; n * c_a * hw];
    let mut db = vec![0.0f32; n * c_b * hw];
    for i in 0..n {
        let src = &grad_out[i * (c_a + c_b) * hw..][..(c_a + c_b) * hw];
        da[i * c_a * hw..][..c_a * hw].copy_from_slice(&src[..c_a * hw]);
        db[i * c_b * hw..][..c_b * hw].copy_from_slice(&src[c_a * hw..]);
    }
    (da, db)
}

/// Per-channel batch statistics and normalized output saved for backward.
pub struct BnContext {
    pub x_hat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Batch norm, training mode: normalize with batch statistics (biased
/// variance over N*H*W samples per channel).
pub fn batchnorm_train_forward(
    input: &[f32],
    gamma: &[f32],
    beta: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    eps: f32,
) -> (Vec<f32>, BnContext) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for i in 0..n {
            let plane = &input[(i * c + ch) * hw..][..hw];
            acc += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = acc / m;
        let mut vacc = 0.0f64;
        for i in 0..n {
            let plane = &input[(i * c + ch) * hw..][..hw];
            vacc += plane.iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (vacc / m) as f32;
        inv_std[ch] = (1.0 / (vacc / m + eps as f64).sqrt()) as f32;
    }
    let mut x_hat = vec![0.0f32; input.len()];
    let mut out = vec![0.0f32; input.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (gm, bt) = (gamma[ch], beta[ch]);
            for j in 0..hw {
                let xh = (input[base + j] - mu) * is;
                x_hat[base + j] = xh;
                out[base + j] = gm * xh + bt;
            }
        }
    }
    (out, BnContext { x_hat, inv_std, mean, var })
}

/// Gradients through training-mode batch norm, including the dependence of
/// the batch statistics on the input.
pub fn batchnorm_train_backward(
    grad_out: &[f32],
    ctx: &BnContext,
    gamma: &[f32],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = (n * hw) as f64;
    let mut d_gamma = vec![0.0f32; c];
    let mut d_beta = vec![0.0f32; c];
    let mut d_input = vec![0.0f32; grad_out.len()];
    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let g = grad_out[base + j] as f64;
                sum_g += g;
                sum_gx += g * ctx.x_hat[base + j] as f64;
            }
        }
        d_gamma[ch] = sum_gx as f32;
        d_beta[ch] = sum_g as f32;
        let scale = gamma[ch] as f64 * ctx.inv_std[ch] as f64;
        let mean_g = sum_g / m;
        let mean_gx = sum_gx / m;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let g = grad_out[base + j] as f64;
                let xh = ctx.x_hat[base + j] as f64;
                d_input[base + j] = (scale * (g - mean_g - xh * mean_gx)) as f32;
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

/// Batch norm, eval mode: per-element affine map using running statistics.
pub fn batchnorm_eval_forward(
    input: &[f32],
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    eps: f32,
) -> Vec<f32> {
    let mut out = vec![0.0f32; input.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let is = 1.0 / (running_var[ch] + eps).sqrt();
            let (mu, gm, bt) = (running_mean[ch], gamma[ch], beta[ch]);
            for j in 0..hw {
                out[base + j] = gm * (input[base + j] - mu) * is + bt;
            }
        }
    }
    out
}

pub fn batchnorm_eval_backward(
    grad_out: &[f32],
    input: &[f32],
    gamma: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut d_gamma = vec![0.0f32; c];
    let mut d_beta = vec![0.0f32; c];
    let mut d_input = vec![0.0f32; grad_out.len()];
    for ch in 0..c {
        let is = 1.0 / (running_var[ch] + eps).sqrt();
        let mu = running_mean[ch];
        let mut sg = 0.0f64;
        let mut sgx = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let g = grad_out[base + j];
                sg += g as f64;
                sgx += g as f64 * ((input[base + j] - mu) * is) as f64;
                d_input[base + j] = g * gamma[ch] * is;
            }
        }
        d_gamma[ch] = sgx as f32;
        d_beta[ch] = sg as f32;
    }
    (d_input, d_gamma, d_beta)
}

/// Full-tensor sum accumulated in f64.
pub fn sum_f64(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum()
}
