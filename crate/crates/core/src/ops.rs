//! Raw neural-network kernels on plain tensors.
//!
//! These are the forward/backward pairs the autograd graph wraps. All of
//! them are single-threaded and allocation-honest: given the same inputs
//! they produce bit-identical outputs, which the reproducibility contract
//! of the pipeline leans on.

use crate::tensor::{axpy, dot, Tensor};

pub fn conv2d_out_dim(in_size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (in_size + 2 * pad - kernel) / stride + 1
}

/// Patch matrix for im2col convolution: row `p = i_out * wo + j_out` holds
/// the receptive field of that output position, flattened as
/// `(ci * kh + ki) * kw + kj` to match the weight layout. Out-of-image
/// entries are zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    xd: &[f64],
    cin: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let patch = cin * kh * kw;
    let mut buf = vec![0.0; ho * wo * patch];
    for i_out in 0..ho {
        for j_out in 0..wo {
            let row = &mut buf[(i_out * wo + j_out) * patch..(i_out * wo + j_out + 1) * patch];
            for ci in 0..cin {
                let x_ch = &xd[ci * h * wd..(ci + 1) * h * wd];
                for ki in 0..kh {
                    let i_in = (i_out * stride + ki) as i64 - pad as i64;
                    if i_in < 0 || i_in >= h as i64 {
                        continue;
                    }
                    let x_row = &x_ch[i_in as usize * wd..(i_in as usize + 1) * wd];
                    let dst = &mut row[(ci * kh + ki) * kw..(ci * kh + ki + 1) * kw];
                    let j_base = (j_out * stride) as i64 - pad as i64;
                    if j_base >= 0 && j_base + kw as i64 <= wd as i64 {
                        dst.copy_from_slice(&x_row[j_base as usize..j_base as usize + kw]);
                    } else {
                        for (kj, d) in dst.iter_mut().enumerate() {
                            let j_in = j_base + kj as i64;
                            if j_in >= 0 && j_in < wd as i64 {
                                *d = x_row[j_in as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    buf
}

/// Scatter-add a patch-gradient matrix back into input gradients (col2im).
#[allow(clippy::too_many_arguments)]
fn col2im(
    patch_grad: &[f64],
    cin: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let patch = cin * kh * kw;
    let mut dx = vec![0.0; cin * h * wd];
    for i_out in 0..ho {
        for j_out in 0..wo {
            let row = &patch_grad[(i_out * wo + j_out) * patch..(i_out * wo + j_out + 1) * patch];
            for ci in 0..cin {
                let dx_ch = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                for ki in 0..kh {
                    let i_in = (i_out * stride + ki) as i64 - pad as i64;
                    if i_in < 0 || i_in >= h as i64 {
                        continue;
                    }
                    let dx_row = &mut dx_ch[i_in as usize * wd..(i_in as usize + 1) * wd];
                    let src = &row[(ci * kh + ki) * kw..(ci * kh + ki + 1) * kw];
                    let j_base = (j_out * stride) as i64 - pad as i64;
                    for (kj, &v) in src.iter().enumerate() {
                        let j_in = j_base + kj as i64;
                        if j_in >= 0 && j_in < wd as i64 {
                            dx_row[j_in as usize] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution (cross-correlation) over a `[Cin, H, W]` input with a
/// `[Cout, Cin, k, k]` weight, zero padding. Uses an im2col patch matrix so
/// the inner loops are long contiguous dot products.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert_eq!(b.shape(), &[cout]);
    let ho = conv2d_out_dim(h, kh, stride, pad);
    let wo = conv2d_out_dim(wd, kw, stride, pad);
    let patch = cin * kh * kw;
    let positions = ho * wo;
    let patches = im2col(x.data(), cin, h, wd, kh, kw, stride, pad, ho, wo);

    let wdat = w.data();
    let bd = b.data();
    let mut out = vec![0.0; cout * positions];
    for co in 0..cout {
        let w_row = &wdat[co * patch..(co + 1) * patch];
        let out_ch = &mut out[co * positions..(co + 1) * positions];
        for (p, o) in out_ch.iter_mut().enumerate() {
            *o = bd[co] + dot(w_row, &patches[p * patch..(p + 1) * patch]);
        }
    }
    Tensor::from_vec(vec![cout, ho, wo], out)
}

/// Gradients of `conv2d` with respect to input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (_, ho, wo) = grad_out.chw();
    let patch = cin * kh * kw;
    let positions = ho * wo;
    let patches = im2col(x.data(), cin, h, wd, kh, kw, stride, pad, ho, wo);

    let wdat = w.data();
    let gd = grad_out.data();

    let mut db = vec![0.0; cout];
    let mut dw = vec![0.0; w.numel()];
    let mut patch_grad = vec![0.0; positions * patch];
    for co in 0..cout {
        let g_ch = &gd[co * positions..(co + 1) * positions];
        db[co] = g_ch.iter().sum();
        let w_row = &wdat[co * patch..(co + 1) * patch];
        let dw_row = &mut dw[co * patch..(co + 1) * patch];
        for (p, &g) in g_ch.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, &patches[p * patch..(p + 1) * patch], dw_row);
            axpy(g, w_row, &mut patch_grad[p * patch..(p + 1) * patch]);
        }
    }
    let dx = col2im(&patch_grad, cin, h, wd, kh, kw, stride, pad, ho, wo);
    (
        Tensor::from_vec(vec![cin, h, wd], dx),
        Tensor::from_vec(w.shape().to_vec(), dw),
        Tensor::from_vec(vec![cout], db),
    )
}

/// `y = W x + b` for a `[Din]` vector and `[Dout, Din]` weight.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let din = x.numel();
    let ws = w.shape();
    assert_eq!(ws.len(), 2);
    let (dout, wdin) = (ws[0], ws[1]);
    assert_eq!(din, wdin, "linear dim mismatch");
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let out: Vec<f64> =
        (0..dout).map(|o| bd[o] + dot(&wd[o * din..(o + 1) * din], xd)).collect();
    Tensor::from_vec(vec![dout], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let din = x.numel();
    let ws = w.shape();
    let (dout, _) = (ws[0], ws[1]);
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();

    let mut dx = vec![0.0; din];
    let mut dw = vec![0.0; dout * din];
    for o in 0..dout {
        let g = gd[o];
        axpy(g, &wd[o * din..(o + 1) * din], &mut dx);
        axpy(g, xd, &mut dw[o * din..(o + 1) * din]);
    }
    (
        Tensor::from_vec(vec![din], dx),
        Tensor::from_vec(vec![dout, din], dw),
        Tensor::from_vec(vec![dout], gd.to_vec()),
    )
}

/// Group normalization without affine: per group, `(x - mean) / sqrt(var + eps)`.
/// Returns the normalized tensor and per-group inverse std (for backward).
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> (Tensor, Vec<f64>) {
    let (c, h, w) = x.chw();
    assert!(groups >= 1 && c % groups == 0, "groups {groups} must divide channels {c}");
    let gsize = (c / groups) * h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut inv_stds = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &xd[g * gsize..(g + 1) * gsize];
        let m = gsize as f64;
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[g * gsize..(g + 1) * gsize].iter_mut().zip(xs) {
            *o = (v - mean) * inv_std;
        }
        inv_stds.push(inv_std);
    }
    (Tensor::from_vec(vec![c, h, w], out), inv_stds)
}

/// Backward of [`group_norm`] given its output `y` and cached inverse stds.
pub fn group_norm_backward(y: &Tensor, inv_stds: &[f64], groups: usize, grad: &Tensor) -> Tensor {
    let (c, h, w) = y.chw();
    let gsize = (c / groups) * h * w;
    let yd = y.data();
    let gd = grad.data();
    let mut dx = vec![0.0; yd.len()];
    for g in 0..groups {
        let ys = &yd[g * gsize..(g + 1) * gsize];
        let gs = &gd[g * gsize..(g + 1) * gsize];
        let m = gsize as f64;
        let g_mean = gs.iter().sum::<f64>() / m;
        let gy_mean = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / m;
        let inv_std = inv_stds[g];
        for ((d, &gi), &yi) in dx[g * gsize..(g + 1) * gsize].iter_mut().zip(gs).zip(ys) {
            *d = inv_std * (gi - g_mean - yi * gy_mean);
        }
    }
    Tensor::from_vec(vec![c, h, w], dx)
}

/// Per-channel instance statistics: population mean and std of each channel.
pub fn instance_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.chw();
    let m = (h * w) as f64;
    let mut means = Vec::with_capacity(c);
    let mut stds = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = x.channel(ch);
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Instance normalization with a hard std floor: `(x - mu_c) / max(sigma_c, floor)`.
/// Returns the normalized tensor plus per-channel `(sigma_used, floored)` pairs.
pub fn instance_norm_floored(x: &Tensor, floor: f64) -> (Tensor, Vec<(f64, bool)>) {
    let (c, h, w) = x.chw();
    let m = (h * w) as f64;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut sigmas = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = &xd[ch * h * w..(ch + 1) * h * w];
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let raw = var.sqrt();
        let (sigma, floored) = if raw < floor { (floor, true) } else { (raw, false) };
        let inv = 1.0 / sigma;
        for (o, &v) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
        sigmas.push((sigma, floored));
    }
    (Tensor::from_vec(vec![c, h, w], out), sigmas)
}

/// Backward of [`instance_norm_floored`]. On floored channels sigma is a
/// constant, so only the mean-subtraction term contributes.
pub fn instance_norm_floored_backward(
    y: &Tensor,
    sigmas: &[(f64, bool)],
    grad: &Tensor,
) -> Tensor {
    let (c, h, w) = y.chw();
    let m = (h * w) as f64;
    let yd = y.data();
    let gd = grad.data();
    let mut dx = vec![0.0; yd.len()];
    for ch in 0..c {
        let ys = &yd[ch * h * w..(ch + 1) * h * w];
        let gs = &gd[ch * h * w..(ch + 1) * h * w];
        let (sigma, floored) = sigmas[ch];
        let g_mean = gs.iter().sum::<f64>() / m;
        let gy_mean = if floored {
            0.0
        } else {
            gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / m
        };
        let inv = 1.0 / sigma;
        for ((d, &gi), &yi) in dx[ch * h * w..(ch + 1) * h * w].iter_mut().zip(gs).zip(ys) {
            *d = inv * (gi - g_mean - yi * gy_mean);
        }
    }
    Tensor::from_vec(vec![c, h, w], dx)
}

/// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
pub fn upsample_nearest_2x(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let xd = x.data();
    let mut out = vec![0.0; c * 4 * h * w];
    let (ho, wo) = (2 * h, 2 * w);
    for ch in 0..c {
        for i in 0..ho {
            let src = &xd[ch * h * w + (i / 2) * w..ch * h * w + (i / 2) * w + w];
            let dst = &mut out[ch * ho * wo + i * wo..ch * ho * wo + (i + 1) * wo];
            for j in 0..wo {
                dst[j] = src[j / 2];
            }
        }
    }
    Tensor::from_vec(vec![c, ho, wo], out)
}

pub fn upsample_nearest_2x_backward(grad: &Tensor) -> Tensor {
    let (c, ho, wo) = grad.chw();
    let (h, w) = (ho / 2, wo / 2);
    let gd = grad.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                dx[ch * h * w + (i / 2) * w + j / 2] += gd[ch * ho * wo + i * wo + j];
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], dx)
}

/// Sinusoidal timestep embedding: `dim/2` sine plus `dim/2` cosine features
/// with log-spaced frequencies.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Tensor::from_vec(vec![dim], out)
}
