//! Forward and backward kernels for the layer set the networks use.
//!
//! Everything here is a pure function over [`Tensor`] values (batch norm in
//! train mode additionally updates the caller's running statistics). The
//! autodiff tape records which kernel produced a value and replays the
//! matching backward kernel in reverse order.
//!
//! All loops run in a fixed order, so results are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::{el, Elem, Tensor};

/// Output extent of a convolution along one axis.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Clipped half-open range of output indices `o` such that
/// `o*stride + off` lands inside `[0, in_extent)`.
#[inline]
fn out_range(out_extent: usize, in_extent: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let top = in_extent as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

fn check_conv_geometry(
    context: &'static str,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(), TensorError> {
    if stride < 1 {
        return Err(TensorError::Dimension {
            context,
            detail: "stride must be >= 1".into(),
        });
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(TensorError::Dimension {
            context,
            detail: format!("kernel {k} does not fit padded input {h}x{w} (pad {pad})"),
        });
    }
    Ok(())
}

// ── convolution ─────────────────────────────────────────────────────────

/// 2-d convolution; input NCHW, weight OIKK, bias O.
pub fn conv2d<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, wi, kh_, kw_) = weight.dims4()?;
    if wi != ci {
        return Err(TensorError::Dimension {
            context: "conv2d",
            detail: format!("input has {ci} channels, weight expects {wi}"),
        });
    }
    if kh_ != kw_ {
        return Err(TensorError::Dimension {
            context: "conv2d",
            detail: format!("non-square kernel {kh_}x{kw_}"),
        });
    }
    let k = kh_;
    if bias.numel() != co {
        return Err(TensorError::Dimension {
            context: "conv2d",
            detail: format!("bias has {} entries, expected {co}", bias.numel()),
        });
    }
    check_conv_geometry("conv2d", h, w, k, stride, pad)?;
    let ho = conv_extent(h, k, stride, pad);
    let wo = conv_extent(w, k, stride, pad);

    let x = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![T::zero(); n * co * ho * wo];

    for ni in 0..n {
        for o in 0..co {
            let ob = ((ni * co + o) * ho) * wo;
            out[ob..ob + ho * wo].fill(bd[o]);
            for i in 0..ci {
                let ib = ((ni * ci + i) * h) * w;
                for kh in 0..k {
                    let offy = kh as isize - pad as isize;
                    let (ylo, yhi) = out_range(ho, h, stride, offy);
                    for kw in 0..k {
                        let wv = wd[((o * ci + i) * k + kh) * k + kw];
                        let offx = kw as isize - pad as isize;
                        let (xlo, xhi) = out_range(wo, w, stride, offx);
                        if xlo >= xhi {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = (oy * stride) as isize + offy;
                            let ir = ib + iy as usize * w;
                            let or = ob + oy * wo;
                            if stride == 1 {
                                let s0 = (ir + xlo) as isize + offx;
                                let src = &x[s0 as usize..s0 as usize + (xhi - xlo)];
                                let dst = &mut out[or + xlo..or + xhi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d = *d + wv * *s;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = (ox * stride) as isize + offx;
                                    out[or + ox] = out[or + ox] + wv * x[ir + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, co, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight, and bias.
pub fn conv2d_backward<T: Elem>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, w) = input.dims4().expect("conv2d_backward input");
    let (co, _, k, _) = weight.dims4().expect("conv2d_backward weight");
    let (_, _, ho, wo) = grad_out.dims4().expect("conv2d_backward grad");

    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); co];

    for ni in 0..n {
        for o in 0..co {
            let ob = ((ni * co + o) * ho) * wo;
            let mut bsum = T::zero();
            for gv in &g[ob..ob + ho * wo] {
                bsum = bsum + *gv;
            }
            db[o] = db[o] + bsum;
            for i in 0..ci {
                let ib = ((ni * ci + i) * h) * w;
                for kh in 0..k {
                    let offy = kh as isize - pad as isize;
                    let (ylo, yhi) = out_range(ho, h, stride, offy);
                    for kw in 0..k {
                        let wv = wd[((o * ci + i) * k + kh) * k + kw];
                        let offx = kw as isize - pad as isize;
                        let (xlo, xhi) = out_range(wo, w, stride, offx);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut wsum = T::zero();
                        for oy in ylo..yhi {
                            let iy = (oy * stride) as isize + offy;
                            let ir = ib + iy as usize * w;
                            let or = ob + oy * wo;
                            if stride == 1 {
                                let s0 = ((ir + xlo) as isize + offx) as usize;
                                let gi = &g[or + xlo..or + xhi];
                                let xi = &x[s0..s0 + (xhi - xlo)];
                                let di = &mut dx[s0..s0 + (xhi - xlo)];
                                for ((gv, xv), dv) in gi.iter().zip(xi).zip(di.iter_mut()) {
                                    wsum = wsum + *gv * *xv;
                                    *dv = *dv + wv * *gv;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = ((ox * stride) as isize + offx) as usize;
                                    let gv = g[or + ox];
                                    wsum = wsum + gv * x[ir + ix];
                                    dx[ir + ix] = dx[ir + ix] + wv * gv;
                                }
                            }
                        }
                        let wi = ((o * ci + i) * k + kh) * k + kw;
                        dw[wi] = dw[wi] + wsum;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(vec![n, ci, h, w], dx).unwrap(),
        Tensor::from_vec(weight.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(vec![co], db).unwrap(),
    )
}

// ── transposed convolution ──────────────────────────────────────────────

/// Transposed 2-d convolution; input NCHW, weight (C_in, C_out, K, K), bias C_out.
///
/// The forward map is the adjoint of [`conv2d`]'s input gradient with the
/// same weight tensor: `<conv2d(x, W), y> == <x, deconv2d(y, W)>`.
pub fn deconv2d<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let (n, ci, h, w) = input.dims4()?;
    let (wi, co, kh_, kw_) = weight.dims4()?;
    if wi != ci {
        return Err(TensorError::Dimension {
            context: "deconv2d",
            detail: format!("input has {ci} channels, weight expects {wi}"),
        });
    }
    if kh_ != kw_ {
        return Err(TensorError::Dimension {
            context: "deconv2d",
            detail: format!("non-square kernel {kh_}x{kw_}"),
        });
    }
    let k = kh_;
    if bias.numel() != co {
        return Err(TensorError::Dimension {
            context: "deconv2d",
            detail: format!("bias has {} entries, expected {co}", bias.numel()),
        });
    }
    if stride < 1 {
        return Err(TensorError::Dimension {
            context: "deconv2d",
            detail: "stride must be >= 1".into(),
        });
    }
    if (h - 1) * stride + k < 2 * pad + 1 || (w - 1) * stride + k < 2 * pad + 1 {
        return Err(TensorError::Dimension {
            context: "deconv2d",
            detail: format!("padding {pad} swallows the whole {h}x{w} output"),
        });
    }
    let ho = deconv_extent(h, k, stride, pad);
    let wo = deconv_extent(w, k, stride, pad);

    let x = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![T::zero(); n * co * ho * wo];

    for ni in 0..n {
        for o in 0..co {
            let ob = ((ni * co + o) * ho) * wo;
            out[ob..ob + ho * wo].fill(bd[o]);
            for i in 0..ci {
                let ib = ((ni * ci + i) * h) * w;
                for kh in 0..k {
                    let offy = kh as isize - pad as isize;
                    // scatter: out row index = y*stride + offy
                    let (ylo, yhi) = out_range(h, ho, stride, offy);
                    for kw in 0..k {
                        let wv = wd[((i * co + o) * k + kh) * k + kw];
                        let offx = kw as isize - pad as isize;
                        let (xlo, xhi) = out_range(w, wo, stride, offx);
                        if xlo >= xhi {
                            continue;
                        }
                        for y in ylo..yhi {
                            let oy = ((y * stride) as isize + offy) as usize;
                            let ir = ib + y * w;
                            let or = ob + oy * wo;
                            if stride == 1 {
                                let d0 = ((or + xlo) as isize + offx) as usize;
                                let src = &x[ir + xlo..ir + xhi];
                                let dst = &mut out[d0..d0 + (xhi - xlo)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d = *d + wv * *s;
                                }
                            } else {
                                for xc in xlo..xhi {
                                    let ox = ((xc * stride) as isize + offx) as usize;
                                    out[or + ox] = out[or + ox] + wv * x[ir + xc];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, co, ho, wo], out)
}

/// Gradients of [`deconv2d`] with respect to input, weight, and bias.
pub fn deconv2d_backward<T: Elem>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, w) = input.dims4().expect("deconv2d_backward input");
    let (_, co, k, _) = weight.dims4().expect("deconv2d_backward weight");
    let (_, _, ho, wo) = grad_out.dims4().expect("deconv2d_backward grad");

    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); co];

    for ni in 0..n {
        for o in 0..co {
            let ob = ((ni * co + o) * ho) * wo;
            let mut bsum = T::zero();
            for gv in &g[ob..ob + ho * wo] {
                bsum = bsum + *gv;
            }
            db[o] = db[o] + bsum;
            for i in 0..ci {
                let ib = ((ni * ci + i) * h) * w;
                for kh in 0..k {
                    let offy = kh as isize - pad as isize;
                    let (ylo, yhi) = out_range(h, ho, stride, offy);
                    for kw in 0..k {
                        let wv = wd[((i * co + o) * k + kh) * k + kw];
                        let offx = kw as isize - pad as isize;
                        let (xlo, xhi) = out_range(w, wo, stride, offx);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut wsum = T::zero();
                        for y in ylo..yhi {
                            let oy = ((y * stride) as isize + offy) as usize;
                            let ir = ib + y * w;
                            let or = ob + oy * wo;
                            if stride == 1 {
                                let d0 = ((or + xlo) as isize + offx) as usize;
                                let gi = &g[d0..d0 + (xhi - xlo)];
                                let xi = &x[ir + xlo..ir + xhi];
                                let di = &mut dx[ir + xlo..ir + xhi];
                                for ((gv, xv), dv) in gi.iter().zip(xi).zip(di.iter_mut()) {
                                    wsum = wsum + *gv * *xv;
                                    *dv = *dv + wv * *gv;
                                }
                            } else {
                                for xc in xlo..xhi {
                                    let ox = ((xc * stride) as isize + offx) as usize;
                                    let gv = g[or + ox];
                                    wsum = wsum + gv * x[ir + xc];
                                    dx[ir + xc] = dx[ir + xc] + wv * gv;
                                }
                            }
                        }
                        let wi = ((i * co + o) * k + kh) * k + kw;
                        dw[wi] = dw[wi] + wsum;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(vec![n, ci, h, w], dx).unwrap(),
        Tensor::from_vec(weight.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(vec![co], db).unwrap(),
    )
}

// ── batch normalization ─────────────────────────────────────────────────

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Elem> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Intermediate values batch-norm backward needs.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch norm in train mode: normalize with batch statistics and update the
/// running stats in place (momentum `mom`, unbiased variance).
pub fn batch_norm_train<T: Elem>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running: &mut RunningStats<T>,
    eps: T,
    mom: T,
) -> Result<(Tensor<T>, BnSaved<T>), TensorError> {
    let (n, c, h, w) = input.dims4()?;
    if scale.numel() != c || shift.numel() != c || running.mean.len() != c {
        return Err(TensorError::Dimension {
            context: "batch_norm",
            detail: format!(
                "channel mismatch: input {c}, scale {}, shift {}",
                scale.numel(),
                shift.numel()
            ),
        });
    }
    let m = n * h * w;
    if m < 2 {
        return Err(TensorError::Dimension {
            context: "batch_norm",
            detail: format!("train mode needs at least 2 values per channel, got {m}"),
        });
    }
    let x = input.data();
    let sc = scale.data();
    let sh = shift.data();
    let mf = el::<T>(m as f64);
    let plane = h * w;

    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];

    for ci in 0..c {
        let mut sum = T::zero();
        for ni in 0..n {
            let b = ((ni * c + ci) * h) * w;
            for v in &x[b..b + plane] {
                sum = sum + *v;
            }
        }
        let mean = sum / mf;
        let mut ss = T::zero();
        for ni in 0..n {
            let b = ((ni * c + ci) * h) * w;
            for v in &x[b..b + plane] {
                let d = *v - mean;
                ss = ss + d * d;
            }
        }
        let var = ss / mf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[ci] = inv;
        for ni in 0..n {
            let b = ((ni * c + ci) * h) * w;
            for j in b..b + plane {
                let xh = (x[j] - mean) * inv;
                xhat[j] = xh;
                out[j] = sc[ci] * xh + sh[ci];
            }
        }
        let unbiased = ss / el::<T>((m - 1) as f64);
        running.mean[ci] = (T::one() - mom) * running.mean[ci] + mom * mean;
        running.var[ci] = (T::one() - mom) * running.var[ci] + mom * unbiased;
    }
    let out = Tensor::from_vec(input.shape().to_vec(), out)?;
    let xhat = Tensor::from_vec(input.shape().to_vec(), xhat)?;
    Ok((out, BnSaved { xhat, inv_std }))
}

/// Gradients of [`batch_norm_train`]: (d_input, d_scale, d_shift).
pub fn batch_norm_train_backward<T: Elem>(
    grad_out: &Tensor<T>,
    saved: &BnSaved<T>,
    scale: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = grad_out.dims4().expect("bn backward grad");
    let g = grad_out.data();
    let xh = saved.xhat.data();
    let sc = scale.data();
    let m = el::<T>((n * h * w) as f64);
    let plane = h * w;

    let mut dx = vec![T::zero(); g.len()];
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];

    for ci in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ni in 0..n {
            let b = ((ni * c + ci) * h) * w;
            for j in b..b + plane {
                sum_g = sum_g + g[j];
                sum_gx = sum_gx + g[j] * xh[j];
            }
        }
        dscale[ci] = sum_gx;
        dshift[ci] = sum_g;
        let k = sc[ci] * saved.inv_std[ci];
        let mg = sum_g / m;
        let mgx = sum_gx / m;
        for ni in 0..n {
            let b = ((ni * c + ci) * h) * w;
            for j in b..b + plane {
                dx[j] = k * (g[j] - mg - xh[j] * mgx);
            }
        }
    }
    (
        Tensor::from_vec(grad_out.shape().to_vec(), dx).unwrap(),
        Tensor::from_vec(vec![c], dscale).unwrap(),
        Tensor::from_vec(vec![c], dshift).unwrap(),
    )
}

/// Batch norm in eval mode: deterministic, uses running statistics only.
pub fn batch_norm_eval<T: Elem>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running: &RunningStats<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = input.dims4()?;
    if scale.numel() != c || running.mean.len() != c {
        return Err(TensorError::Dimension {
            context: "batch_norm",
            detail: format!("channel mismatch: input {c}, scale {}", scale.numel()),
        });
    }
    let x = input.data();
    let sc = scale.data();
    let sh = shift.data();
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        let inv = T::one() / (running.var[ci] + eps).sqrt();
        let a = sc[ci] * inv;
        let b0 = sh[ci] - a * running.mean[ci];
        for ni in 0..n {
            let b = ((ni * c + ci) * h) * w;
            for j in b..b + plane {
                out[j] = a * x[j] + b0;
            }
        }
    }
    Tensor::from_vec(input.shape().to_vec(), out)
}

// ── dropout ─────────────────────────────────────────────────────────────

/// Per-element keep factors for inverted dropout: `1/(1-rate)` for kept
/// elements, zero for dropped ones. Reproducible from the seed.
pub fn dropout_mask<T: Elem>(numel: usize, rate: f64, seed: u64) -> Result<Vec<T>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::DropoutRate(rate));
    }
    let keep = el::<T>(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect())
}

pub fn mul_mask<T: Elem>(input: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(mask)
        .map(|(&x, &m)| x * m)
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data).unwrap()
}

// ── simple elementwise / structural ops ─────────────────────────────────

pub fn relu<T: Elem>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Elem>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data).unwrap()
}

/// Non-overlapping average pooling; requires H and W divisible by `window`.
pub fn avg_pool<T: Elem>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = input.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(TensorError::Dimension {
            context: "avg_pool",
            detail: format!("spatial dims {h}x{w} not divisible by window {window}"),
        });
    }
    let ho = h / window;
    let wo = w / window;
    let x = input.data();
    let inv = el::<T>(1.0 / (window * window) as f64);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..window {
                    let r = ib + (oy * window + dy) * w + ox * window;
                    for v in &x[r..r + window] {
                        s = s + *v;
                    }
                }
                out[ob + oy * wo + ox] = s * inv;
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}

pub fn avg_pool_backward<T: Elem>(grad_out: &Tensor<T>, window: usize) -> Tensor<T> {
    let (n, c, ho, wo) = grad_out.dims4().expect("avg_pool backward grad");
    let g = grad_out.data();
    let inv = el::<T>(1.0 / (window * window) as f64);
    let h = ho * window;
    let w = wo * window;
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[ob + oy * wo + ox] * inv;
                for dy in 0..window {
                    let r = ib + (oy * window + dy) * w + ox * window;
                    for v in &mut dx[r..r + window] {
                        *v = *v + gv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], dx).unwrap()
}

/// Channel concatenation, `a` channels first.
pub fn concat_channels<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if n != nb || h != hb || w != wb {
        return Err(TensorError::ShapeMismatch {
            context: "concat_channels",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let plane = h * w;
    let mut out = Vec::with_capacity((ca + cb) * n * plane);
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * ca * plane..(ni + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    Tensor::from_vec(vec![n, ca + cb, h, w], out)
}

/// Split a concat gradient back into the two input gradients.
pub fn concat_channels_backward<T: Elem>(
    grad_out: &Tensor<T>,
    ca: usize,
    cb: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (n, _, h, w) = grad_out.dims4().expect("concat backward grad");
    let plane = h * w;
    let g = grad_out.data();
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for ni in 0..n {
        let b = ni * (ca + cb) * plane;
        da.extend_from_slice(&g[b..b + ca * plane]);
        db.extend_from_slice(&g[b + ca * plane..b + (ca + cb) * plane]);
    }
    (
        Tensor::from_vec(vec![n, ca, h, w], da).unwrap(),
        Tensor::from_vec(vec![n, cb, h, w], db).unwrap(),
    )
}

/// Zero-pad at the bottom/right edges.
pub fn pad_hw<T: Elem>(input: &Tensor<T>, bottom: usize, right: usize) -> Tensor<T> {
    let (n, c, h, w) = input.dims4().expect("pad_hw input");
    if bottom == 0 && right == 0 {
        return input.clone();
    }
    let (ho, wo) = (h + bottom, w + right);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for nc in 0..n * c {
        for y in 0..h {
            let src = nc * h * w + y * w;
            let dst = nc * ho * wo + y * wo;
            out[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out).unwrap()
}

/// Keep the top-left `new_h` x `new_w` region.
pub fn crop_hw<T: Elem>(input: &Tensor<T>, new_h: usize, new_w: usize) -> Tensor<T> {
    let (n, c, h, w) = input.dims4().expect("crop_hw input");
    assert!(new_h <= h && new_w <= w, "crop larger than input");
    if new_h == h && new_w == w {
        return input.clone();
    }
    let x = input.data();
    let mut out = vec![T::zero(); n * c * new_h * new_w];
    for nc in 0..n * c {
        for y in 0..new_h {
            let src = nc * h * w + y * w;
            let dst = nc * new_h * new_w + y * new_w;
            out[dst..dst + new_w].copy_from_slice(&x[src..src + new_w]);
        }
    }
    Tensor::from_vec(vec![n, c, new_h, new_w], out).unwrap()
}

/// Backward of [`crop_hw`]: re-embed the gradient into the pre-crop shape.
pub fn crop_hw_backward<T: Elem>(grad_out: &Tensor<T>, full_h: usize, full_w: usize) -> Tensor<T> {
    let (n, c, h, w) = grad_out.dims4().expect("crop backward grad");
    let g = grad_out.data();
    let mut dx = vec![T::zero(); n * c * full_h * full_w];
    for nc in 0..n * c {
        for y in 0..h {
            let src = nc * h * w + y * w;
            let dst = nc * full_h * full_w + y * full_w;
            dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
        }
    }
    Tensor::from_vec(vec![n, c, full_h, full_w], dx).unwrap()
}

// ── losses ──────────────────────────────────────────────────────────────

/// Softmax cross-entropy over class logits at every valid pixel.
///
/// Returns the scalar loss, the softmax probabilities (zero at masked
/// pixels), and the number of valid pixels.
pub fn softmax_cross_entropy<T: Elem>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(T, Tensor<T>, usize), TensorError> {
    let (n, c, h, w) = logits.dims4()?;
    let px = n * h * w;
    if targets.len() != px || mask.len() != px {
        return Err(TensorError::Dimension {
            context: "softmax_cross_entropy",
            detail: format!(
                "logits imply {px} pixels, got {} targets / {} mask entries",
                targets.len(),
                mask.len()
            ),
        });
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(TensorError::EmptyBatch);
    }
    let z = logits.data();
    let plane = h * w;
    let mut probs = vec![T::zero(); z.len()];
    let mut loss = T::zero();
    for ni in 0..n {
        for p in 0..plane {
            let pix = ni * plane + p;
            if !mask[pix] {
                continue;
            }
            let t = targets[pix];
            if t as usize >= c {
                return Err(TensorError::ClassRange {
                    class: t,
                    classes: c,
                });
            }
            let base = ni * c * plane + p;
            let mut mx = z[base];
            for ci in 1..c {
                let v = z[base + ci * plane];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for ci in 0..c {
                denom = denom + (z[base + ci * plane] - mx).exp();
            }
            let lse = denom.ln() + mx;
            loss = loss + lse - z[base + t as usize * plane];
            for ci in 0..c {
                probs[base + ci * plane] = (z[base + ci * plane] - lse).exp();
            }
        }
    }
    let loss = loss / el::<T>(n_valid as f64);
    Ok((
        loss,
        Tensor::from_vec(logits.shape().to_vec(), probs)?,
        n_valid,
    ))
}

/// Gradient of [`softmax_cross_entropy`] w.r.t. the logits.
pub fn softmax_cross_entropy_backward<T: Elem>(
    upstream: T,
    probs: &Tensor<T>,
    targets: &[u32],
    mask: &[bool],
    n_valid: usize,
) -> Tensor<T> {
    let (n, c, h, w) = probs.dims4().expect("ce backward probs");
    let plane = h * w;
    let p = probs.data();
    let scale = upstream / el::<T>(n_valid as f64);
    let mut dz = vec![T::zero(); p.len()];
    for ni in 0..n {
        for px in 0..plane {
            let pix = ni * plane + px;
            if !mask[pix] {
                continue;
            }
            let base = ni * c * plane + px;
            for ci in 0..c {
                let mut v = p[base + ci * plane];
                if ci as u32 == targets[pix] {
                    v = v - T::one();
                }
                dz[base + ci * plane] = v * scale;
            }
        }
    }
    Tensor::from_vec(probs.shape().to_vec(), dz).unwrap()
}

/// Mean absolute error over valid pixels. Returns (loss, n_valid).
pub fn l1_loss<T: Elem>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
) -> Result<(T, usize), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "l1_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    if mask.len() != pred.numel() {
        return Err(TensorError::Dimension {
            context: "l1_loss",
            detail: format!("{} mask entries for {} elements", mask.len(), pred.numel()),
        });
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(TensorError::EmptyBatch);
    }
    let mut s = T::zero();
    for ((&p, &t), &m) in pred.data().iter().zip(target.data()).zip(mask) {
        if m {
            s = s + (p - t).abs();
        }
    }
    Ok((s / el::<T>(n_valid as f64), n_valid))
}

/// Subgradient of [`l1_loss`] w.r.t. the prediction; defined as 0 where
/// `pred == target`.
pub fn l1_loss_backward<T: Elem>(
    upstream: T,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    n_valid: usize,
) -> Tensor<T> {
    let scale = upstream / el::<T>(n_valid as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask)
        .map(|((&p, &t), &m)| {
            if !m {
                T::zero()
            } else if p > t {
                scale
            } else if p < t {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(pred.shape().to_vec(), data).unwrap()
}

/// Weighted sum reduction to a scalar: `sum(x * coeffs)`.
pub fn reduce_dot<T: Elem>(x: &Tensor<T>, coeffs: &Tensor<T>) -> Result<T, TensorError> {
    if x.shape() != coeffs.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "reduce_dot",
            left: x.shape().to_vec(),
            right: coeffs.shape().to_vec(),
        });
    }
    let mut s = T::zero();
    for (&a, &b) in x.data().iter().zip(coeffs.data()) {
        s = s + a * b;
    }
    Ok(s)
}
