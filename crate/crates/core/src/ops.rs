//! Raw forward and backward kernels on plain f64 buffers.
//!
//! Every kernel partitions its *output* buffer into disjoint chunks and
//! computes each chunk independently, so the `parallel` feature can hand the
//! chunks to rayon without changing results: no kernel ever reduces across
//! threads, and every floating-point accumulation happens in a fixed index
//! order. Thread count therefore never affects a single output bit.

use crate::error::{Error, Result};
use crate::tensor::{idx4, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(i, chunk_i)` over consecutive `chunk`-sized pieces of `out`,
/// in parallel when the `parallel` feature is enabled.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    debug_assert_eq!(out.len() % chunk, 0);
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

pub(crate) fn map_vec(src: &[f64], f: impl Fn(f64) -> f64 + Send + Sync) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    return src.par_iter().map(|&x| f(x)).collect();
    #[cfg(not(feature = "parallel"))]
    src.iter().map(|&x| f(x)).collect()
}

pub(crate) fn zip_map_vec(
    a: &[f64],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64 + Send + Sync,
) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    return a
        .par_iter()
        .zip(b.par_iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    #[cfg(not(feature = "parallel"))]
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Reflected index into an axis of length n: reads past either end walk
/// back into the data without repeating the edge sample, however far the
/// index overshoots.
pub(crate) fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Numerically stable logistic function: never exponentiates a positive
/// argument, so it cannot overflow for any finite input.
#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activations. All are applied value-by-value; derivatives at
/// the non-differentiable points of `Relu` and `Abs` are defined as 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointwiseFn {
    Relu,
    Sigmoid,
    Abs,
    Square,
    /// x * sigmoid(x) + x, the amplification applied to poorly predicted
    /// regions inside the windowed region loss.
    SiluPlusIdentity,
}

impl PointwiseFn {
    #[inline(always)]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            PointwiseFn::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            PointwiseFn::Sigmoid => sigmoid(x),
            PointwiseFn::Abs => x.abs(),
            PointwiseFn::Square => x * x,
            PointwiseFn::SiluPlusIdentity => x * sigmoid(x) + x,
        }
    }

    /// Derivative at `x`; `y` is the already-computed `apply(x)` so sigmoid
    /// does not have to exponentiate twice.
    #[inline(always)]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            PointwiseFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            PointwiseFn::Sigmoid => y * (1.0 - y),
            PointwiseFn::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            PointwiseFn::Square => 2.0 * x,
            PointwiseFn::SiluPlusIdentity => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s) + 1.0
            }
        }
    }
}

pub fn pointwise_forward(input: &Tensor, f: PointwiseFn) -> Tensor {
    let data = map_vec(input.data(), move |x| f.apply(x));
    Tensor::from_vec(input.shape().to_vec(), data).expect("same shape as input")
}

pub fn pointwise_backward(input: &Tensor, output: &Tensor, f: PointwiseFn, grad_out: &[f64]) -> Vec<f64> {
    debug_assert_eq!(grad_out.len(), input.numel());
    let x = input.data();
    let y = output.data();
    #[cfg(feature = "parallel")]
    return (0..x.len())
        .into_par_iter()
        .map(|i| grad_out[i] * f.derivative(x[i], y[i]))
        .collect();
    #[cfg(not(feature = "parallel"))]
    (0..x.len())
        .map(|i| grad_out[i] * f.derivative(x[i], y[i]))
        .collect()
}

fn check_nonempty(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().iter().any(|&d| d == 0) {
        return Err(Error::invalid(
            op,
            format!("tensor with shape {:?} has a zero-sized dimension", t.shape()),
        ));
    }
    Ok(())
}

/// 2-D convolution (cross-correlation, the deep-learning convention) with
/// zero padding. Input (B, Ci, H, W), kernel (Co, Ci, Kh, Kw), bias (Co,).
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b_n, ci, h, w) = input.dims4()?;
    let (co, ci_k, kh, kw) = kernel.dims4()?;
    check_nonempty("conv2d", input)?;
    check_nonempty("conv2d", kernel)?;
    if ci_k != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels but kernel expects {}", ci, ci_k),
        ));
    }
    if bias.shape() != [co] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {} output channels", bias.shape(), co),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "kernel {}x{} does not fit padded input {}x{} (padding {})",
                kh, kw, h, w, padding
            ),
        ));
    }
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;

    let mut out = Tensor::zeros(&[b_n, co, h_out, w_out]);
    let x = input.data();
    let k = kernel.data();
    let bi = bias.data();
    for_each_chunk(out.data_mut(), h_out * w_out, |plane, dst| {
        let b = plane / co;
        let o = plane % co;
        for y in 0..h_out {
            for xo in 0..w_out {
                let mut acc = bi[o];
                for i in 0..ci {
                    for ky in 0..kh {
                        let hi = y * stride + ky;
                        if hi < padding || hi - padding >= h {
                            continue;
                        }
                        let hi = hi - padding;
                        let in_row = &x[idx4(ci, h, w, b, i, hi, 0)..][..w];
                        let k_row = &k[idx4(ci_k, kh, kw, o, i, ky, 0)..][..kw];
                        for kx in 0..kw {
                            let wi = xo * stride + kx;
                            if wi < padding || wi - padding >= w {
                                continue;
                            }
                            acc += in_row[wi - padding] * k_row[kx];
                        }
                    }
                }
                dst[y * w_out + xo] = acc;
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to (input, kernel, bias).
/// All three are gather-form loops: each gradient element is accumulated by
/// exactly one chunk, in a fixed order.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b_n, ci, h, w) = input.dims4()?;
    let (co, _, kh, kw) = kernel.dims4()?;
    let (gb, gc, h_out, w_out) = grad_out.dims4()?;
    if gb != b_n || gc != co {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} does not match batch {} / out channels {}",
                grad_out.shape(),
                b_n,
                co
            ),
        ));
    }

    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();

    let mut grad_in = Tensor::zeros(&[b_n, ci, h, w]);
    for_each_chunk(grad_in.data_mut(), h * w, |plane, dst| {
        let b = plane / ci;
        let i = plane % ci;
        for hi in 0..h {
            for wi in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let hp = hi + padding;
                    if hp < ky {
                        continue;
                    }
                    let dy = hp - ky;
                    if !dy.is_multiple_of(stride) {
                        continue;
                    }
                    let y = dy / stride;
                    if y >= h_out {
                        continue;
                    }
                    for kx in 0..kw {
                        let wp = wi + padding;
                        if wp < kx {
                            continue;
                        }
                        let dx = wp - kx;
                        if dx % stride != 0 {
                            continue;
                        }
                        let xo = dx / stride;
                        if xo >= w_out {
                            continue;
                        }
                        for o in 0..co {
                            acc += g[idx4(co, h_out, w_out, b, o, y, xo)]
                                * k[idx4(ci, kh, kw, o, i, ky, kx)];
                        }
                    }
                }
                dst[hi * w + wi] = acc;
            }
        }
    });

    let mut grad_kernel = Tensor::zeros(&[co, ci, kh, kw]);
    for_each_chunk(grad_kernel.data_mut(), kh * kw, |pair, dst| {
        let o = pair / ci;
        let i = pair % ci;
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = 0.0;
                for b in 0..b_n {
                    for y in 0..h_out {
                        let hi = y * stride + ky;
                        if hi < padding || hi - padding >= h {
                            continue;
                        }
                        let hi = hi - padding;
                        for xo in 0..w_out {
                            let wi = xo * stride + kx;
                            if wi < padding || wi - padding >= w {
                                continue;
                            }
                            acc += g[idx4(co, h_out, w_out, b, o, y, xo)]
                                * x[idx4(ci, h, w, b, i, hi, wi - padding)];
                        }
                    }
                }
                dst[ky * kw + kx] = acc;
            }
        }
    });

    let mut grad_bias = Tensor::zeros(&[co]);
    for_each_chunk(grad_bias.data_mut(), 1, |o, dst| {
        let mut acc = 0.0;
        for b in 0..b_n {
            let plane = &g[idx4(co, h_out, w_out, b, o, 0, 0)..][..h_out * w_out];
            for &v in plane {
                acc += v;
            }
        }
        dst[0] = acc;
    });

    Ok((grad_in, grad_kernel, grad_bias))
}

/// Softmax across the channel dimension, independently at every (batch,
/// height, width) position. The running maximum is subtracted before
/// exponentiation so large activations cannot overflow.
pub fn channel_softmax_forward(input: &Tensor) -> Result<Tensor> {
    let (b_n, c, h, w) = input.dims4()?;
    check_nonempty("channel_softmax", input)?;
    let x = input.data();
    let plane = c * h * w;
    let mut out = Tensor::zeros(&[b_n, c, h, w]);
    for_each_chunk(out.data_mut(), plane, |b, dst| {
        let src = &x[b * plane..][..plane];
        for p in 0..h * w {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(src[ch * h * w + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (src[ch * h * w + p] - max).exp();
                dst[ch * h * w + p] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[ch * h * w + p] /= sum;
            }
        }
    });
    Ok(out)
}

pub fn channel_softmax_backward(output: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let (b_n, c, h, w) = output.dims4().expect("softmax output is 4-d");
    let y = output.data();
    let plane = c * h * w;
    let mut grad_in = vec![0.0; b_n * plane];
    for_each_chunk(&mut grad_in, plane, |b, dst| {
        let yv = &y[b * plane..][..plane];
        let gv = &grad_out[b * plane..][..plane];
        for p in 0..h * w {
            let mut dot = 0.0;
            for ch in 0..c {
                let i = ch * h * w + p;
                dot += gv[i] * yv[i];
            }
            for ch in 0..c {
                let i = ch * h * w + p;
                dst[i] = yv[i] * (gv[i] - dot);
            }
        }
    });
    grad_in
}

/// 2x2 max pooling with stride 2. Height and width must be even. Ties are
/// broken toward the first element in row-major window order, and the
/// backward pass routes the incoming gradient to that same element only.
pub fn maxpool2_forward(input: &Tensor) -> Result<Tensor> {
    let (b_n, c, h, w) = input.dims4()?;
    check_nonempty("maxpool2", input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("spatial extent {}x{} is not divisible by 2", h, w),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Tensor::zeros(&[b_n, c, ho, wo]);
    for_each_chunk(out.data_mut(), ho * wo, |plane, dst| {
        let src = &x[plane * h * w..][..h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = src[(2 * y + dy) * w + 2 * xo + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                dst[y * wo + xo] = best;
            }
        }
    });
    Ok(out)
}

pub fn maxpool2_backward(input: &Tensor, grad_out: &Tensor) -> Vec<f64> {
    let (b_n, c, h, w) = input.dims4().expect("maxpool input is 4-d");
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = vec![0.0; b_n * c * h * w];
    for_each_chunk(&mut grad_in, h * w, |plane, dst| {
        let src = &x[plane * h * w..][..h * w];
        let gp = &g[plane * ho * wo..][..ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let pos = (2 * y + dy) * w + 2 * xo + dx;
                        if src[pos] > best {
                            best = src[pos];
                            arg = pos;
                        }
                    }
                }
                dst[arg] += gp[y * wo + xo];
            }
        }
    });
    grad_in
}

/// Axis sampling table for bilinear interpolation with half-pixel centers
/// (`align_corners = false`): output position o reads source positions
/// lo/hi with weights (1 - frac)/frac.
fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = (floor as isize).clamp(0, n_in as isize - 1) as usize;
            let hi = (floor as isize + 1).clamp(0, n_in as isize - 1) as usize;
            (lo, hi, frac)
        })
        .collect()
}

/// Doubles height and width by bilinear interpolation with half-pixel
/// sampling, matching the usual deep-learning upsample. Constant planes stay
/// exactly constant.
pub fn bilinear_up2_forward(input: &Tensor) -> Result<Tensor> {
    let (b_n, c, h, w) = input.dims4()?;
    check_nonempty("bilinear_up2", input)?;
    let (ho, wo) = (2 * h, 2 * w);
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    let x = input.data();
    let mut out = Tensor::zeros(&[b_n, c, ho, wo]);
    for_each_chunk(out.data_mut(), ho * wo, |plane, dst| {
        let src = &x[plane * h * w..][..h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = ys[oy];
            for ox in 0..wo {
                let (x0, x1, fx) = xs[ox];
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * wo + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    });
    Ok(out)
}

pub fn bilinear_up2_backward(input: &Tensor, grad_out: &Tensor) -> Vec<f64> {
    let (b_n, c, h, w) = input.dims4().expect("bilinear input is 4-d");
    let (ho, wo) = (2 * h, 2 * w);
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    let g = grad_out.data();
    let mut grad_in = vec![0.0; b_n * c * h * w];
    for_each_chunk(&mut grad_in, h * w, |plane, dst| {
        let gp = &g[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = ys[oy];
            for ox in 0..wo {
                let (x0, x1, fx) = xs[ox];
                let go = gp[oy * wo + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * go;
                dst[y0 * w + x1] += (1.0 - fy) * fx * go;
                dst[y1 * w + x0] += fy * (1.0 - fx) * go;
                dst[y1 * w + x1] += fy * fx * go;
            }
        }
    });
    grad_in
}

/// Non-overlapping f x f block summation; the exact count-preserving way to
/// bring a full-resolution density map down to the prediction grid.
pub fn sumpool_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (b_n, c, h, w) = input.dims4()?;
    check_nonempty("sumpool", input)?;
    if factor == 0 {
        return Err(Error::invalid("sumpool", "factor must be at least 1"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "sumpool",
            format!("spatial extent {}x{} is not divisible by factor {}", h, w, factor),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let x = input.data();
    let mut out = Tensor::zeros(&[b_n, c, ho, wo]);
    for_each_chunk(out.data_mut(), ho * wo, |plane, dst| {
        let src = &x[plane * h * w..][..h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = &src[(y * factor + dy) * w + xo * factor..][..factor];
                    for &v in row {
                        acc += v;
                    }
                }
                dst[y * wo + xo] = acc;
            }
        }
    });
    Ok(out)
}

pub fn sumpool_backward(input: &Tensor, factor: usize, grad_out: &Tensor) -> Vec<f64> {
    let (b_n, c, h, w) = input.dims4().expect("sumpool input is 4-d");
    let (ho, wo) = (h / factor, w / factor);
    let g = grad_out.data();
    let mut grad_in = vec![0.0; b_n * c * h * w];
    for_each_chunk(&mut grad_in, h * w, |plane, dst| {
        let gp = &g[plane * ho * wo..][..ho * wo];
        for hi in 0..h {
            for wi in 0..w {
                dst[hi * w + wi] = gp[(hi / factor) * wo + wi / factor];
            }
        }
    });
    grad_in
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    Add,
    Sub,
    Mul,
}

pub fn combine_forward(a: &Tensor, b: &Tensor, mode: CombineMode) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "combine",
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let data = match mode {
        CombineMode::Add => zip_map_vec(a.data(), b.data(), |x, y| x + y),
        CombineMode::Sub => zip_map_vec(a.data(), b.data(), |x, y| x - y),
        CombineMode::Mul => zip_map_vec(a.data(), b.data(), |x, y| x * y),
    };
    Ok(Tensor::from_vec(a.shape().to_vec(), data).expect("same shape as operands"))
}

pub fn combine_backward(
    a: &Tensor,
    b: &Tensor,
    mode: CombineMode,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    match mode {
        CombineMode::Add => (grad_out.to_vec(), grad_out.to_vec()),
        CombineMode::Sub => (grad_out.to_vec(), map_vec(grad_out, |g| -g)),
        CombineMode::Mul => (
            zip_map_vec(grad_out, b.data(), |g, y| g * y),
            zip_map_vec(grad_out, a.data(), |g, x| g * x),
        ),
    }
}

/// Stacks `b` after `a` along the channel dimension.
pub fn concat_channels_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels",
            format!("operand shapes {:?} and {:?} differ outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let c_out = ca + cb;
    let plane = ha * wa;
    let (xa, xb) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[ba, c_out, ha, wa]);
    for_each_chunk(out.data_mut(), plane, |p, dst| {
        let batch = p / c_out;
        let ch = p % c_out;
        let src = if ch < ca {
            &xa[(batch * ca + ch) * plane..][..plane]
        } else {
            &xb[(batch * cb + (ch - ca)) * plane..][..plane]
        };
        dst.copy_from_slice(src);
    });
    Ok(out)
}

pub fn concat_channels_backward(a: &Tensor, b: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ba, ca, ha, wa) = a.dims4().expect("concat operand is 4-d");
    let (_, cb, _, _) = b.dims4().expect("concat operand is 4-d");
    let plane = ha * wa;
    let c_out = ca + cb;
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for batch in 0..ba {
        for ch in 0..ca {
            let src = &grad_out[(batch * c_out + ch) * plane..][..plane];
            ga[(batch * ca + ch) * plane..][..plane].copy_from_slice(src);
        }
        for ch in 0..cb {
            let src = &grad_out[(batch * c_out + ca + ch) * plane..][..plane];
            gb[(batch * cb + ch) * plane..][..plane].copy_from_slice(src);
        }
    }
    (ga, gb)
}

/// Collapses the channel axis by summation, yielding a single-channel map.
pub fn sum_channels_forward(input: &Tensor) -> Result<Tensor> {
    let (b_n, c, h, w) = input.dims4()?;
    check_nonempty("sum_channels", input)?;
    let x = input.data();
    let plane = h * w;
    let mut out = Tensor::zeros(&[b_n, 1, h, w]);
    for_each_chunk(out.data_mut(), plane, |b, dst| {
        let src = &x[b * c * plane..][..c * plane];
        for p in 0..plane {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += src[ch * plane + p];
            }
            dst[p] = acc;
        }
    });
    Ok(out)
}

pub fn sum_channels_backward(input: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    let (b_n, c, h, w) = input.dims4().expect("sum_channels input is 4-d");
    let plane = h * w;
    let mut grad_in = vec![0.0; b_n * c * plane];
    for_each_chunk(&mut grad_in, plane, |p, dst| {
        let b = p / c;
        dst.copy_from_slice(&grad_out[b * plane..][..plane]);
    });
    grad_in
}

/// Sum of every element, as a scalar tensor. Sequential by design: this is
/// the one place a cross-buffer reduction happens, and keeping it in flat
/// index order makes the result independent of thread count.
pub fn sum_all_forward(input: &Tensor) -> Tensor {
    Tensor::scalar(input.sum())
}

pub fn sum_all_backward(input: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    vec![grad_out[0]; input.numel()]
}

pub fn scale_forward(input: &Tensor, factor: f64) -> Tensor {
    let data = map_vec(input.data(), move |x| x * factor);
    Tensor::from_vec(input.shape().to_vec(), data).expect("same shape as input")
}

pub fn scale_backward(factor: f64, grad_out: &[f64]) -> Vec<f64> {
    map_vec(grad_out, move |g| g * factor)
}

/// General bilinear resampling with half-pixel centers. Inference-time
/// utility (no backward pass); used to shrink very large evaluation images.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b_n, c, h, w) = input.dims4()?;
    check_nonempty("bilinear_resize", input)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", "output extent must be at least 1"));
    }
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    let x = input.data();
    let mut out = Tensor::zeros(&[b_n, c, out_h, out_w]);
    for_each_chunk(out.data_mut(), out_h * out_w, |plane, dst| {
        let src = &x[plane * h * w..][..h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = ys[oy];
            for ox in 0..out_w {
                let (x0, x1, fx) = xs[ox];
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * out_w + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let input = t4([1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.5, -0.5]);
        let kernel = t4([1, 1, 1, 1], vec![1.0]);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_known_2x2_kernel() {
        // 3x3 input 1..9 against kernel [[1,2],[3,4]], worked out by hand.
        let input = t4([1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let kernel = t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bias = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let out = conv2d_forward(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[37.5, 47.5, 67.5, 77.5]);
    }

    #[test]
    fn conv_zero_padding_counts_in_bounds_taps() {
        // All-ones input and kernel: each output counts how many taps landed
        // inside the image.
        let input = t4([1, 1, 2, 2], vec![1.0; 4]);
        let kernel = t4([1, 1, 3, 3], vec![1.0; 9]);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &kernel, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_stride_two_subsamples() {
        let input = t4([1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let kernel = t4([1, 1, 1, 1], vec![1.0]);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &kernel, &bias, 2, 0).unwrap();
        assert_eq!(out.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_mixes_input_channels() {
        let input = t4([1, 2, 1, 1], vec![3.0, 5.0]);
        let kernel = t4([1, 2, 1, 1], vec![10.0, 100.0]);
        let bias = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let out = conv2d_forward(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out.data(), &[531.0]);
    }

    #[test]
    fn conv_rejects_mismatched_channels_and_oversized_kernels() {
        let input = t4([1, 2, 4, 4], vec![0.0; 32]);
        let kernel = t4([1, 3, 1, 1], vec![0.0; 3]);
        let bias = Tensor::zeros(&[1]);
        assert!(conv2d_forward(&input, &kernel, &bias, 1, 0).is_err());

        let kernel = t4([1, 2, 5, 5], vec![0.0; 50]);
        assert!(conv2d_forward(&input, &kernel, &bias, 1, 0).is_err());
        assert!(conv2d_forward(&input, &kernel, &bias, 0, 0).is_err());
    }

    #[test]
    fn conv_backward_matches_hand_gradients_for_1x1() {
        // y = k*x + b on a 2-element map; d/dx = k, d/dk = sum(g*x), d/db = sum(g).
        let input = t4([1, 1, 1, 2], vec![3.0, -2.0]);
        let kernel = t4([1, 1, 1, 1], vec![5.0]);
        let grad_out = t4([1, 1, 1, 2], vec![1.0, 2.0]);
        let (gi, gk, gb) = conv2d_backward(&input, &kernel, 1, 0, &grad_out).unwrap();
        assert_eq!(gi.data(), &[5.0, 10.0]);
        assert_eq!(gk.data(), &[3.0 - 4.0]);
        assert_eq!(gb.data(), &[3.0]);
    }

    #[test]
    fn softmax_matches_reference_values() {
        // softmax(1,2,3) evaluated with 40-digit arithmetic.
        let input = t4([1, 3, 1, 1], vec![1.0, 2.0, 3.0]);
        let out = channel_softmax_forward(&input).unwrap();
        let expect = [
            0.09003057317038046,
            0.24472847105479764,
            0.6652409557748219,
        ];
        for (got, want) in out.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{} vs {}", got, want);
        }
    }

    #[test]
    fn softmax_survives_huge_activations() {
        let input = t4([1, 2, 1, 1], vec![1000.0, 1001.0]);
        let out = channel_softmax_forward(&input).unwrap();
        assert!(out.is_finite());
        let s: f64 = out.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_channel_is_all_ones() {
        let input = t4([2, 1, 2, 2], vec![5.0, -3.0, 0.0, 7.0, 1.0, 1.0, 2.0, -9.0]);
        let out = channel_softmax_forward(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn maxpool_takes_first_of_tied_maxima() {
        // All four candidates tie; the whole gradient must land on the
        // first window element in row-major order and nowhere else.
        let input = t4([1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let out = maxpool2_forward(&input).unwrap();
        assert_eq!(out.data(), &[5.0]);
        let grad_out = t4([1, 1, 1, 1], vec![1.0]);
        let gin = maxpool2_backward(&input, &grad_out);
        assert_eq!(gin, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_the_maximum() {
        let input = t4([1, 1, 2, 4], vec![0.0, 1.0, 9.0, 2.0, 7.0, 3.0, 4.0, 5.0]);
        let out = maxpool2_forward(&input).unwrap();
        assert_eq!(out.data(), &[7.0, 9.0]);
        let grad_out = t4([1, 1, 1, 2], vec![10.0, 20.0]);
        let gin = maxpool2_backward(&input, &grad_out);
        assert_eq!(gin, vec![0.0, 0.0, 20.0, 0.0, 10.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        assert!(maxpool2_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn bilinear_up2_keeps_constants_constant() {
        let input = Tensor::full(&[1, 2, 3, 5], 2.5);
        let out = bilinear_up2_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 6, 10]);
        assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn bilinear_up2_interpolates_along_a_row() {
        let input = t4([1, 1, 1, 2], vec![1.0, 3.0]);
        let out = bilinear_up2_forward(&input).unwrap();
        let expect = [1.0, 1.5, 2.5, 3.0];
        for (got, want) in out.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{} vs {}", got, want);
        }
    }

    #[test]
    fn sumpool_blocks_sum_and_shape() {
        let input = t4([1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = sumpool_forward(&input, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data(), &[14.0, 22.0]);
        assert_eq!(out.sum(), input.sum());
    }

    #[test]
    fn sumpool_rejects_non_divisible_factor() {
        assert!(sumpool_forward(&Tensor::zeros(&[1, 1, 6, 6]), 4).is_err());
        assert!(sumpool_forward(&Tensor::zeros(&[1, 1, 6, 6]), 0).is_err());
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let a = t4([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t4([2, 2, 1, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let out = concat_channels_forward(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            out.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let g: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let (ga, gb) = concat_channels_backward(&a, &b, &g);
        assert_eq!(ga, vec![0.0, 1.0, 6.0, 7.0]);
        assert_eq!(gb, vec![2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn sum_channels_collapses_to_one_plane() {
        let input = t4([1, 3, 1, 2], vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0]);
        let out = sum_channels_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data(), &[111.0, 222.0]);
    }

    #[test]
    fn silu_plus_identity_matches_reference_value() {
        // x*sigmoid(x) + x at x = 2, evaluated with 40-digit arithmetic.
        let got = PointwiseFn::SiluPlusIdentity.apply(2.0);
        assert!((got - 3.7615941559557649).abs() < 1e-15, "{}", got);
    }

    #[test]
    fn pointwise_derivatives_at_kinks_are_zero() {
        assert_eq!(PointwiseFn::Relu.derivative(0.0, 0.0), 0.0);
        assert_eq!(PointwiseFn::Abs.derivative(0.0, 0.0), 0.0);
        assert_eq!(PointwiseFn::Relu.derivative(-1.0, 0.0), 0.0);
        assert_eq!(PointwiseFn::Abs.derivative(-2.0, 2.0), -1.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn bilinear_resize_identity_when_sizes_match() {
        let input = t4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = bilinear_resize(&input, 2, 2).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn bilinear_resize_downscale_averages() {
        // Halving a 1x4 row with half-pixel centers lands exactly between
        // sample pairs.
        let input = t4([1, 1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]);
        let out = bilinear_resize(&input, 1, 2).unwrap();
        assert_eq!(out.data(), &[1.0, 5.0]);
    }
}
