//! Forward and backward compute kernels on plain [`Tensor`] values.
//!
//! Every kernel is deterministic: parallel regions write disjoint output
//! slices and all floating-point reductions run in a fixed sequential
//! order, so repeated calls with the same inputs are bitwise identical
//! regardless of thread scheduling.

use rayon::prelude::*;

use crate::error::{FaError, Result};
use crate::tensor::Tensor;

/// Below this many elements the elementwise kernels stay single-threaded.
const PAR_MIN: usize = 1 << 15;
const PAR_CHUNK: usize = 1 << 14;

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

fn par_map1(x: &[f32], shape: &[usize], f: impl Fn(f32) -> f32 + Sync) -> Tensor {
    let data: Vec<f32> = if x.len() < PAR_MIN {
        x.iter().map(|&v| f(v)).collect()
    } else {
        x.par_iter().with_min_len(PAR_CHUNK).map(|&v| f(v)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("map preserves shape")
}

fn par_map2(a: &[f32], b: &[f32], shape: &[usize], f: impl Fn(f32, f32) -> f32 + Sync) -> Tensor {
    let data: Vec<f32> = if a.len() < PAR_MIN {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.par_iter()
            .with_min_len(PAR_CHUNK)
            .zip(b.par_iter().with_min_len(PAR_CHUNK))
            .map(|(&x, &y)| f(x, y))
            .collect()
    };
    Tensor::new(shape.to_vec(), data).expect("map preserves shape")
}

/// `tanh` via `(1 - e^-2|x|) / (1 + e^-2|x|)` with a polynomial `exp`.
///
/// Absolute error stays under ~2e-6 against the libm reference, the
/// range never leaves `[-1, 1]`, `fast_tanh(0) == 0` exactly, inputs
/// beyond `|x| > 9` saturate to exactly `+-1`, and NaN propagates. The
/// pure-arithmetic body vectorizes where libm's tanh cannot.
#[inline]
pub fn fast_tanh(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    if ax > 9.0 {
        return 1.0f32.copysign(x);
    }
    // e^-2ax, Cody-Waite reduction: t = 2^k * e^r, r in [-ln2/2, ln2/2]
    let t = -2.0 * ax; // in [-18, 0]
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_375; // exact in f32
    const LN2_LO: f32 = -2.121_944_4e-4;
    let k = (t * LOG2E).round();
    let r = (t - k * LN2_HI) - k * LN2_LO;
    // degree-6 Taylor of e^r; |r| <= 0.3466 keeps the tail below 2e-7
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let e = p * f32::from_bits(((k as i32 + 127) << 23) as u32);
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FaError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    // `v < 0.0` keeps NaN flowing through, so a diverged forward pass
    // surfaces as a NaN loss instead of being silently zeroed
    par_map1(x.data(), out.data_mut(), |v| if v < 0.0 { 0.0 } else { v });
    out
}

/// d relu(x) = grad where x > 0, else 0 (the subgradient at 0 is taken as 0).
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(input.shape());
    par_map2(input.data(), grad.data(), out.data_mut(), |x, g| if x > 0.0 { g } else { 0.0 });
    out
}

pub fn tanh(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    par_map1(x.data(), out.data_mut(), f32::tanh);
    out
}

/// d tanh in terms of the forward output y: grad * (1 - y^2).
pub fn tanh_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(output.shape());
    par_map2(output.data(), grad.data(), out.data_mut(), |y, g| g * (1.0 - y * y));
    out
}

/// Elementwise activation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => relu(x),
        Activation::Tanh => tanh(x),
    }
}

/// `ca * a + cb * b`, elementwise.
pub fn lincomb(a: &Tensor, ca: f32, b: &Tensor, cb: f32) -> Result<Tensor> {
    same_shape(a, b, "lincomb")?;
    let mut out = Tensor::zeros(a.shape());
    par_map2(a.data(), b.data(), out.data_mut(), |x, y| ca * x + cb * y);
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let mut out = Tensor::zeros(a.shape());
    par_map2(a.data(), b.data(), out.data_mut(), |x, y| x * y);
    Ok(out)
}

pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let mut out = Tensor::zeros(a.shape());
    par_map1(a.data(), out.data_mut(), |x| c * x);
    out
}

// ---------------------------------------------------------------------------
// GEMM + conv2d
// ---------------------------------------------------------------------------

/// `C = alpha*A·B + beta*C` with explicit strides. Thin wrapper so the
/// unsafe call sits in one place.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    debug_assert!(m == 0 || k == 0 || a.len() as isize > (m as isize - 1) * rsa + (k as isize - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() as isize > (k as isize - 1) * rsb + (n as isize - 1) * csb);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(FaError::Shape(format!(
            "conv2d: input has {cin} channels but kernel expects {wcin}"
        )));
    }
    if stride == 0 {
        return Err(FaError::Config("conv2d: stride must be >= 1".into()));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kh || wp < kw {
        return Err(FaError::Config(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
        return Err(FaError::Config(format!(
            "conv2d: output size ({} + 2*{padding} - {kh})/{stride} + 1 is not an integer",
            h
        )));
    }
    let oh = (hp - kh) / stride + 1;
    let ow = (wp - kw) / stride + 1;
    Ok(ConvDims { n, cin, h, w, cout, kh, kw, oh, ow })
}

/// Unfolds one image `[cin, h, w]` into columns `[cin*kh*kw, oh*ow]`.
fn im2col(img: &[f32], d: &ConvDims, stride: usize, pad: usize, col: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let mut r = 0usize;
    for c in 0..d.cin {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &mut col[r * ohw..(r + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if stride == 1 {
                        // valid ox satisfy 0 <= ox + kj - pad < w
                        let lo = (pad as isize - kj as isize).max(0).min(d.ow as isize) as usize;
                        let hi = (d.w as isize + pad as isize - kj as isize).clamp(0, d.ow as isize) as usize;
                        dst[..lo].fill(0.0);
                        if hi > lo {
                            let s = lo + kj - pad;
                            dst[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
                        }
                        dst[hi.max(lo)..].fill(0.0);
                    } else {
                        for ox in 0..d.ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            dst[ox] = if ix >= 0 && ix < d.w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Folds columns `[cin*kh*kw, oh*ow]` back into an image gradient, adding.
fn col2im_add(col: &[f32], d: &ConvDims, stride: usize, pad: usize, img: &mut [f32]) {
    let ohw = d.oh * d.ow;
    let mut r = 0usize;
    for c in 0..d.cin {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &col[r * ohw..(r + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    for ox in 0..d.ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// 2-D cross-correlation with bias, `[N,Cin,H,W] -> [N,Cout,OH,OW]`.
///
/// Images are processed in parallel; each image is one im2col + GEMM.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = conv_dims(input, weight, stride, padding)?;
    if bias.shape() != [d.cout] {
        return Err(FaError::Shape(format!(
            "conv2d: bias shape {:?}, expected [{}]",
            bias.shape(),
            d.cout
        )));
    }
    let ckk = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let in_chw = d.cin * d.h * d.w;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.oh, d.ow]);
    out.data_mut()
        .par_chunks_mut(d.cout * ohw)
        .zip(input.data().par_chunks(in_chw))
        .for_each(|(dst, img)| {
            let mut col = vec![0.0f32; ckk * ohw];
            im2col(img, &d, stride, padding, &mut col);
            sgemm(
                d.cout, ckk, ohw, 1.0,
                weight.data(), ckk as isize, 1,
                &col, ohw as isize, 1,
                0.0,
                dst, ohw as isize, 1,
            );
            for (o, row) in dst.chunks_mut(ohw).enumerate() {
                let b = bias.data()[o];
                if b != 0.0 {
                    for v in row.iter_mut() {
                        *v += b;
                    }
                }
            }
        });
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
///
/// Per-image partial weight gradients are reduced in image order so the
/// result does not depend on the thread count.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let d = conv_dims(input, weight, stride, padding)?;
    if grad_out.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(FaError::Shape(format!(
            "conv2d backward: upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [d.n, d.cout, d.oh, d.ow]
        )));
    }
    let ckk = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let in_chw = d.cin * d.h * d.w;

    let per_image = |img: &[f32], gout: &[f32], dx: Option<&mut [f32]>| -> (Vec<f32>, Vec<f32>) {
        let mut col = vec![0.0f32; ckk * ohw];
        im2col(img, &d, stride, padding, &mut col);
        // dW_i = gout [cout, ohw] x col^T [ohw, ckk]
        let mut dw = vec![0.0f32; d.cout * ckk];
        sgemm(
            d.cout, ohw, ckk, 1.0,
            gout, ohw as isize, 1,
            &col, 1, ohw as isize,
            0.0,
            &mut dw, ckk as isize, 1,
        );
        let mut db = vec![0.0f32; d.cout];
        for (o, slot) in db.iter_mut().enumerate() {
            let mut s = 0.0f32;
            for &g in &gout[o * ohw..(o + 1) * ohw] {
                s += g;
            }
            *slot = s;
        }
        if let Some(dx) = dx {
            // dcol = W^T [ckk, cout] x gout [cout, ohw]
            let mut dcol = vec![0.0f32; ckk * ohw];
            sgemm(
                ckk, d.cout, ohw, 1.0,
                weight.data(), 1, ckk as isize,
                gout, ohw as isize, 1,
                0.0,
                &mut dcol, ohw as isize, 1,
            );
            col2im_add(&dcol, &d, stride, padding, dx);
        }
        (dw, db)
    };

    let mut grad_input = if need_input_grad { Some(Tensor::zeros(input.shape())) } else { None };
    let partials: Vec<(Vec<f32>, Vec<f32>)> = match grad_input.as_mut() {
        Some(gi) => gi
            .data_mut()
            .par_chunks_mut(in_chw)
            .zip(input.data().par_chunks(in_chw))
            .zip(grad_out.data().par_chunks(d.cout * ohw))
            .map(|((dx, img), gout)| per_image(img, gout, Some(dx)))
            .collect(),
        None => input
            .data()
            .par_chunks(in_chw)
            .zip(grad_out.data().par_chunks(d.cout * ohw))
            .map(|(img, gout)| per_image(img, gout, None))
            .collect(),
    };

    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[d.cout]);
    for (pw, pb) in &partials {
        for (acc, v) in dw.data_mut().iter_mut().zip(pw) {
            *acc += v;
        }
        for (acc, v) in db.data_mut().iter_mut().zip(pb) {
            *acc += v;
        }
    }
    Ok(ConvGrads { input: grad_input, weight: dw, bias: db })
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn bn_check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(FaError::Shape(format!(
            "batch norm: gamma {:?} / beta {:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h, w))
}

/// Train-mode batch norm over `[N,C,H,W]`: normalizes with the batch
/// statistics and updates the running estimates in place.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    momentum: f32,
    eps: f32,
) -> Result<(Tensor, BnStats)> {
    let (n, c, h, w) = bn_check(input, gamma, beta)?;
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(FaError::Config(format!(
            "batch norm in train mode needs at least 2 values per channel, got {m}"
        )));
    }
    let x = input.data();
    let stats: Vec<(f32, f32)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0f32;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                for &v in &x[base..base + hw] {
                    sum += v;
                }
            }
            let mean = sum / m as f32;
            let mut var = 0.0f32;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                for &v in &x[base..base + hw] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            (mean, var / m as f32)
        })
        .collect();

    let mut mean = Vec::with_capacity(c);
    let mut inv_std = Vec::with_capacity(c);
    for (ch, &(mu, var)) in stats.iter().enumerate() {
        mean.push(mu);
        inv_std.push(1.0 / (var + eps).sqrt());
        let rm = &mut running_mean.data_mut()[ch];
        *rm = (1.0 - momentum) * *rm + momentum * mu;
        let unbiased = var * m as f32 / (m - 1) as f32;
        let rv = &mut running_var.data_mut()[ch];
        *rv = (1.0 - momentum) * *rv + momentum * unbiased;
    }

    let stats = BnStats { mean, inv_std };
    let out = bn_apply(input, gamma, beta, &stats.mean, &stats.inv_std, c, hw);
    Ok((out, stats))
}

/// Eval-mode batch norm using the running statistics; pure.
pub fn batch_norm_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let (_, c, h, w) = bn_check(input, gamma, beta)?;
    let inv_std: Vec<f32> = running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    Ok(bn_apply(input, gamma, beta, running_mean.data(), &inv_std, c, h * w))
}

fn bn_apply(input: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f32], inv_std: &[f32], c: usize, hw: usize) -> Tensor {
    let mut out = Tensor::zeros(input.shape());
    let sc: Vec<f32> = (0..c).map(|ch| gamma.data()[ch] * inv_std[ch]).collect();
    let sh: Vec<f32> = (0..c).map(|ch| beta.data()[ch] - mean[ch] * sc[ch]).collect();
    out.data_mut()
        .par_chunks_mut(hw)
        .zip(input.data().par_chunks(hw))
        .enumerate()
        .for_each(|(i, (o, xs))| {
            let ch = i % c;
            let (a, b) = (sc[ch], sh[ch]);
            for (oo, &v) in o.iter_mut().zip(xs) {
                *oo = a * v + b;
            }
        });
    out
}

/// Gradients of train-mode batch norm.
pub fn batch_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    same_shape(input, grad_out, "batch norm backward")?;
    let hw = h * w;
    let m = (n * hw) as f32;
    let x = input.data();
    let g = grad_out.data();

    // s1 = sum g, s2 = sum g * xhat, per channel
    let sums: Vec<(f32, f32)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mu = stats.mean[ch];
            let is = stats.inv_std[ch];
            let mut s1 = 0.0f32;
            let mut s2 = 0.0f32;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mu) * is;
                    s1 += g[i];
                    s2 += g[i] * xh;
                }
            }
            (s1, s2)
        })
        .collect();

    let dgamma = Tensor::new(vec![c], sums.iter().map(|&(_, s2)| s2).collect())?;
    let dbeta = Tensor::new(vec![c], sums.iter().map(|&(s1, _)| s1).collect())?;

    let mut dx = Tensor::zeros(input.shape());
    dx.data_mut()
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(i, o)| {
            let ni = i / c;
            let ch = i % c;
            let mu = stats.mean[ch];
            let is = stats.inv_std[ch];
            let (s1, s2) = sums[ch];
            let k = gamma.data()[ch] * is;
            let base = (ni * c + ch) * hw;
            for (j, oo) in o.iter_mut().enumerate() {
                let idx = base + j;
                let xh = (x[idx] - mu) * is;
                *oo = k * (g[idx] - s1 / m - xh * s2 / m);
            }
        });
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// max pooling
// ---------------------------------------------------------------------------

/// Non-overlapping max pool with kernel `(kh, kw)` and stride equal to the
/// kernel. Returns the pooled tensor and, per output element, the flat
/// index of its argmax in the input (first index in row-major order wins
/// ties, which pins the backward routing).
pub fn max_pool2d(input: &Tensor, kh: usize, kw: usize) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    if kh == 0 || kw == 0 {
        return Err(FaError::Config("max pool: kernel must be >= 1".into()));
    }
    if h % kh != 0 || w % kw != 0 {
        return Err(FaError::Config(format!(
            "max pool: kernel ({kh},{kw}) must divide input ({h},{w})"
        )));
    }
    assert!(input.numel() < u32::MAX as usize, "tensor too large for u32 argmax indices");
    let oh = h / kh;
    let ow = w / kw;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (o, am))| {
            let in_base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..kh {
                        let iy = oy * kh + dy;
                        let row = in_base + iy * w + ox * kw;
                        for dx in 0..kw {
                            let v = x[row + dx];
                            if v > best {
                                best = v;
                                best_idx = (row + dx) as u32;
                            }
                        }
                    }
                    o[oy * ow + ox] = best;
                    am[oy * ow + ox] = best_idx;
                }
            }
        });
    Ok((out, argmax))
}

/// Routes the upstream gradient to the recorded argmax positions.
pub fn max_pool2d_backward(argmax: &[u32], input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.numel() {
        return Err(FaError::Shape(format!(
            "max pool backward: {} argmax entries vs {} gradient elements",
            argmax.len(),
            grad_out.numel()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx as usize] += g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// grouped global average pooling head
// ---------------------------------------------------------------------------

/// Grouped 3-D global average pooling: `Y[n,c]` is the mean of the
/// `maps_per_class` channels owned by class `c` over all spatial positions.
pub fn pool_head_forward(a: &Tensor, classes: usize, maps_per_class: usize) -> Result<Tensor> {
    let (n, k, h, w) = a.dims4()?;
    if k != classes * maps_per_class {
        return Err(FaError::Config(format!(
            "pooling head: {k} channels not equal to {classes} classes x {maps_per_class} maps"
        )));
    }
    let z = h * w;
    let norm = 1.0 / (maps_per_class * z) as f32;
    let x = a.data();
    let mut out = Tensor::zeros(&[n, classes]);
    out.data_mut()
        .par_chunks_mut(classes)
        .enumerate()
        .for_each(|(ni, row)| {
            for (c, slot) in row.iter_mut().enumerate() {
                let mut s = 0.0f32;
                for r in 0..maps_per_class {
                    let base = (ni * k + c * maps_per_class + r) * z;
                    for &v in &x[base..base + z] {
                        s += v;
                    }
                }
                *slot = s * norm;
            }
        });
    Ok(out)
}

/// dY/dA is `1/(R*Z)` on owned channels and 0 elsewhere.
pub fn pool_head_backward(
    grad_y: &Tensor,
    a_shape: &[usize],
    classes: usize,
    maps_per_class: usize,
) -> Result<Tensor> {
    let [n, k, h, w] = *a_shape else {
        return Err(FaError::Shape(format!("pool head backward: bad activation shape {a_shape:?}")));
    };
    if grad_y.shape() != [n, classes] {
        return Err(FaError::Shape(format!(
            "pool head backward: gradient {:?}, expected {:?}",
            grad_y.shape(),
            [n, classes]
        )));
    }
    let z = h * w;
    let norm = 1.0 / (maps_per_class * z) as f32;
    let gy = grad_y.data();
    let mut dx = Tensor::zeros(a_shape);
    dx.data_mut().par_chunks_mut(z).enumerate().for_each(|(i, plane)| {
        let ni = i / k;
        let ch = i % k;
        let g = gy[ni * classes + ch / maps_per_class] * norm;
        plane.fill(g);
    });
    Ok(dx)
}

// ---------------------------------------------------------------------------
// linear head
// ---------------------------------------------------------------------------

/// `x [N,D] x w^T [D,C] + b -> [N,C]`.
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din) = x.dims2()?;
    let (cout, dw) = weight.dims2()?;
    if dw != din {
        return Err(FaError::Shape(format!("linear: input dim {din} vs weight dim {dw}")));
    }
    if bias.shape() != [cout] {
        return Err(FaError::Shape(format!("linear: bias {:?}, expected [{cout}]", bias.shape())));
    }
    let mut out = Tensor::zeros(&[n, cout]);
    sgemm(
        n, din, cout, 1.0,
        x.data(), din as isize, 1,
        weight.data(), 1, din as isize,
        0.0,
        out.data_mut(), cout as isize, 1,
    );
    let o = out.data_mut();
    for row in o.chunks_mut(cout) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, din) = x.dims2()?;
    let (cout, _) = weight.dims2()?;
    if grad_out.shape() != [n, cout] {
        return Err(FaError::Shape(format!(
            "linear backward: gradient {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout]
        )));
    }
    // dW = g^T [C,N] x x [N,D]
    let mut dw = Tensor::zeros(weight.shape());
    sgemm(
        cout, n, din, 1.0,
        grad_out.data(), 1, cout as isize,
        x.data(), din as isize, 1,
        0.0,
        dw.data_mut(), din as isize, 1,
    );
    let mut db = Tensor::zeros(&[cout]);
    for row in grad_out.data().chunks(cout) {
        for (acc, &g) in db.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    let dx = if need_input_grad {
        let mut dx = Tensor::zeros(x.shape());
        // dX = g [N,C] x W [C,D]
        sgemm(
            n, cout, din, 1.0,
            grad_out.data(), cout as isize, 1,
            weight.data(), din as isize, 1,
            0.0,
            dx.data_mut(), din as isize, 1,
        );
        Some(dx)
    } else {
        None
    };
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// L1 normalization and losses
// ---------------------------------------------------------------------------

/// Rowwise `y / (sum(y) + eps)` for non-negative `y [N,C]`. Also returns
/// the per-row denominators, which the backward pass reuses.
pub fn l1_normalize(y: &Tensor, eps: f32) -> Result<(Tensor, Vec<f32>)> {
    let (n, c) = y.dims2()?;
    let mut out = Tensor::zeros(&[n, c]);
    let mut denoms = Vec::with_capacity(n);
    for (row_in, row_out) in y.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let mut s = 0.0f32;
        for &v in row_in {
            if v < 0.0 {
                return Err(FaError::Contract(format!(
                    "l1_normalize expects non-negative pre-logits, found {v}"
                )));
            }
            s += v;
        }
        let denom = s + eps;
        denoms.push(denom);
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = v / denom;
        }
    }
    Ok((out, denoms))
}

/// Backward of [`l1_normalize`]: `dy_j = (g_j - <g, yhat>) / denom` per row.
pub fn l1_normalize_backward(output: &Tensor, denoms: &[f32], grad_out: &Tensor) -> Result<Tensor> {
    let (n, c) = output.dims2()?;
    same_shape(output, grad_out, "l1_normalize backward")?;
    let mut dx = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let yhat = &output.data()[i * c..(i + 1) * c];
        let g = &grad_out.data()[i * c..(i + 1) * c];
        let dot: f32 = g.iter().zip(yhat).map(|(a, b)| a * b).sum();
        let denom = denoms[i];
        for j in 0..c {
            dx.data_mut()[i * c + j] = (g[j] - dot) / denom;
        }
    }
    Ok(dx)
}

fn check_targets(n: usize, c: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != n {
        return Err(FaError::Shape(format!("{} targets for batch of {n}", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(FaError::Bounds(format!("target class {t} out of range 0..{c}")));
    }
    Ok(())
}

/// Mean negative log likelihood over already-normalized probabilities.
pub fn nll_from_probs(probs: &Tensor, targets: &[usize], eps: f32) -> Result<f32> {
    let (n, c) = probs.dims2()?;
    check_targets(n, c, targets)?;
    let mut loss = 0.0f32;
    for (i, &t) in targets.iter().enumerate() {
        loss += -(probs.data()[i * c + t] + eps).ln();
    }
    Ok(loss / n as f32)
}

pub fn nll_from_probs_backward(probs: &Tensor, targets: &[usize], eps: f32, upstream: f32) -> Result<Tensor> {
    let (n, c) = probs.dims2()?;
    check_targets(n, c, targets)?;
    let mut dp = Tensor::zeros(&[n, c]);
    for (i, &t) in targets.iter().enumerate() {
        dp.data_mut()[i * c + t] = -upstream / (n as f32 * (probs.data()[i * c + t] + eps));
    }
    Ok(dp)
}

/// Numerically stable softmax cross-entropy; returns the mean loss and the
/// softmax probabilities for the backward pass.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f32, Tensor)> {
    let (n, c) = logits.dims2()?;
    check_targets(n, c, targets)?;
    let mut probs = Tensor::zeros(&[n, c]);
    let mut loss = 0.0f32;
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut lse = 0.0f32;
        for &v in row {
            lse += (v - max).exp();
        }
        let log_z = max + lse.ln();
        for j in 0..c {
            probs.data_mut()[i * c + j] = (row[j] - log_z).exp();
        }
        loss += log_z - row[targets[i]];
    }
    Ok((loss / n as f32, probs))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, targets: &[usize], upstream: f32) -> Result<Tensor> {
    let (n, c) = probs.dims2()?;
    check_targets(n, c, targets)?;
    let mut dl = Tensor::zeros(&[n, c]);
    let scale = upstream / n as f32;
    for i in 0..n {
        for j in 0..c {
            let y = if targets[i] == j { 1.0 } else { 0.0 };
            dl.data_mut()[i * c + j] = (probs.data()[i * c + j] - y) * scale;
        }
    }
    Ok(dl)
}

/// Sum of all elements, as a rank-0 scalar tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let mut s = 0.0f32;
    for &v in x.data() {
        s += v;
    }
    Tensor::scalar(s)
}
