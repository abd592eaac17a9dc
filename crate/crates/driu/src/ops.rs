//! Layer primitives: same-padded convolution, ReLU, 2x2 ceil-mode max pool,
//! align-corners bilinear resize, channel concatenation, sigmoid.
//!
//! Each forward returns the cache its backward consumes. All functions are
//! pure; there is no global state.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::InvalidArgument(format!(
                "kernel must be 1 or 3, got {}",
                kernel
            )));
        }
        if out_channels == 0 {
            return Err(Error::InvalidArgument("out_channels must be >= 1".into()));
        }
        Ok(ConvSpec {
            out_channels,
            kernel,
        })
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    input: Tensor<S>,
    weights: Tensor<S>,
}

fn conv_check<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<()> {
    if input.shape().len() != 3 {
        return Err(Error::shape(format!(
            "conv input must be (C,H,W), got {:?}",
            input.shape()
        )));
    }
    if weights.shape().len() != 4 {
        return Err(Error::shape(format!(
            "conv weights must be (O,C,k,k), got {:?}",
            weights.shape()
        )));
    }
    let k = weights.shape()[2];
    if k != weights.shape()[3] || (k != 1 && k != 3) {
        return Err(Error::shape(format!(
            "conv kernel must be square 1 or 3, got {:?}",
            weights.shape()
        )));
    }
    if weights.shape()[1] != input.shape()[0] {
        return Err(Error::shape(format!(
            "channel mismatch: weights expect {} input channels, input has {}",
            weights.shape()[1],
            input.shape()[0]
        )));
    }
    if bias.shape() != [weights.shape()[0]] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            weights.shape()[0]
        )));
    }
    Ok(())
}

/// Same-padded stride-1 cross-correlation, im2col-free fast path.
///
/// The inner loops run contiguously over width; `conv2d_forward_direct`
/// is the plain 6-nested-loop formulation the tests compare against.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<(Tensor<S>, ConvCache<S>)> {
    conv_check(input, weights, bias)?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let o_ch = weights.shape()[0];
    let k = weights.shape()[2];
    let pad = (k - 1) / 2;

    let mut out = Tensor::zeros(&[o_ch, h, w])?;
    {
        let od = out.data_mut();
        let id = input.data();
        for o in 0..o_ch {
            let b = bias.data()[o];
            let obase = o * h * w;
            od[obase..obase + h * w].fill(b);
            for c in 0..c_in {
                let ibase = c * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weights.at4(o, c, ky, kx);
                        if wv == S::zero() {
                            continue;
                        }
                        let dy = ky as isize - pad as isize;
                        let dx = kx as isize - pad as isize;
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = ibase + sy as usize * w;
                            let orow = obase + y * w;
                            let x_lo = (-dx).max(0) as usize;
                            let x_hi = (w as isize - dx).min(w as isize) as usize;
                            for x in x_lo..x_hi {
                                od[orow + x] += wv * id[srow + (x as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        out,
        ConvCache {
            input: input.clone(),
            weights: weights.clone(),
        },
    ))
}

/// Naive 6-nested-loop reference path. Must agree with `conv2d_forward`
/// within 1e-5 relative.
pub fn conv2d_forward_direct<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    conv_check(input, weights, bias)?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let o_ch = weights.shape()[0];
    let k = weights.shape()[2];
    let pad = (k - 1) as isize / 2;

    let mut out = Tensor::zeros(&[o_ch, h, w])?;
    for o in 0..o_ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.data()[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = x as isize + kx as isize - pad;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                acc += weights.at4(o, c, ky, kx)
                                    * input.at3(c, sy as usize, sx as usize);
                            }
                        }
                    }
                }
                out.set3(o, y, x, acc);
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    cache: &ConvCache<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let input = &cache.input;
    let weights = &cache.weights;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let o_ch = weights.shape()[0];
    let k = weights.shape()[2];
    let pad = (k - 1) / 2;

    if grad_out.shape() != [o_ch, h, w] {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match forward output [{},{},{}]",
            grad_out.shape(),
            o_ch,
            h,
            w
        )));
    }

    let mut grad_bias = Tensor::zeros(&[o_ch])?;
    for o in 0..o_ch {
        let base = o * h * w;
        let mut acc = S::zero();
        for &g in &grad_out.data()[base..base + h * w] {
            acc += g;
        }
        grad_bias.data_mut()[o] = acc;
    }

    let mut grad_weights = Tensor::zeros(weights.shape())?;
    let mut grad_input = Tensor::zeros(input.shape())?;
    {
        let gi = grad_input.data_mut();
        let gw = grad_weights.data_mut();
        let id = input.data();
        let gd = grad_out.data();
        let kk = k * k;
        for o in 0..o_ch {
            let obase = o * h * w;
            for c in 0..c_in {
                let ibase = c * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - pad as isize;
                        let dx = kx as isize - pad as isize;
                        let wv = weights.at4(o, c, ky, kx);
                        let mut wacc = S::zero();
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = ibase + sy as usize * w;
                            let grow = obase + y * w;
                            let x_lo = (-dx).max(0) as usize;
                            let x_hi = (w as isize - dx).min(w as isize) as usize;
                            for x in x_lo..x_hi {
                                let sx = (x as isize + dx) as usize;
                                let g = gd[grow + x];
                                wacc += g * id[srow + sx];
                                gi[srow + sx] += g * wv;
                            }
                        }
                        gw[(o * c_in + c) * kk + ky * k + kx] = wacc;
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

#[derive(Debug, Clone)]
pub struct ReluCache {
    positive: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> (Tensor<S>, ReluCache) {
    let positive: Vec<bool> = input.data().iter().map(|&x| x > S::zero()).collect();
    let out = Tensor::from_vec(
        input.shape(),
        input
            .data()
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect(),
    )
    .expect("same shape");
    (
        out,
        ReluCache {
            positive,
            shape: input.shape().to_vec(),
        },
    )
}

pub fn relu_backward<S: Scalar>(grad_out: &Tensor<S>, cache: &ReluCache) -> Result<Tensor<S>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::shape(format!(
            "relu backward shape {:?} vs cached {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    Tensor::from_vec(
        grad_out.shape(),
        grad_out
            .data()
            .iter()
            .zip(&cache.positive)
            .map(|(&g, &p)| if p { g } else { S::zero() })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Flat input index of the max within each output window.
    argmax: Vec<usize>,
}

/// 2x2 stride-2 max pool, ceil mode with border-truncated windows.
/// Ties go to the first element in row-major window order.
pub fn maxpool2x2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, PoolCache)> {
    if input.shape().len() != 3 {
        return Err(Error::shape(format!(
            "maxpool input must be (C,H,W), got {:?}",
            input.shape()
        )));
    }
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Tensor::zeros(&[c_n, oh, ow])?;
    let mut argmax = vec![0usize; c_n * oh * ow];
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for wy in 0..2usize {
                    for wx in 0..2usize {
                        let y = oy * 2 + wy;
                        let x = ox * 2 + wx;
                        if y < h && x < w {
                            let v = input.at3(c, y, x);
                            if v > best {
                                best = v;
                                best_idx = (c * h + y) * w + x;
                            }
                        }
                    }
                }
                out.set3(c, oy, ox, best);
                argmax[(c * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    Ok((
        out,
        PoolCache {
            in_shape: input.shape().to_vec(),
            out_shape: vec![c_n, oh, ow],
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward<S: Scalar>(grad_out: &Tensor<S>, cache: &PoolCache) -> Result<Tensor<S>> {
    if grad_out.shape() != cache.out_shape.as_slice() {
        return Err(Error::shape(format!(
            "pool backward shape {:?} vs cached {:?}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let mut grad_in = Tensor::zeros(&cache.in_shape)?;
    for (flat, &src) in cache.argmax.iter().enumerate() {
        grad_in.data_mut()[src] += grad_out.data()[flat];
    }
    Ok(grad_in)
}

#[derive(Debug, Clone)]
pub struct ResizeCache {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

#[inline]
fn resize_coords(dst: usize, src_extent: usize, dst_extent: usize) -> (usize, usize, f64) {
    // align-corners: src = dst*(h-1)/(H-1); constant map when H == 1
    if dst_extent == 1 || src_extent == 1 {
        return (0, 0, 0.0);
    }
    let s = dst as f64 * (src_extent - 1) as f64 / (dst_extent - 1) as f64;
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_extent - 1);
    (lo, hi, s - lo as f64)
}

/// Align-corners bilinear upsampling; corner pixels are preserved exactly.
pub fn bilinear_resize<S: Scalar>(
    input: &Tensor<S>,
    target: (usize, usize),
) -> Result<(Tensor<S>, ResizeCache)> {
    if input.shape().len() != 3 {
        return Err(Error::shape(format!(
            "resize input must be (C,H,W), got {:?}",
            input.shape()
        )));
    }
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::Unsupported(format!(
            "downscaling {}x{} -> {}x{} is not supported",
            h, w, th, tw
        )));
    }
    if th == 0 || tw == 0 {
        return Err(Error::shape("zero target extent"));
    }
    let mut out = Tensor::zeros(&[c_n, th, tw])?;
    for c in 0..c_n {
        for y in 0..th {
            let (y0, y1, fy) = resize_coords(y, h, th);
            for x in 0..tw {
                let (x0, x1, fx) = resize_coords(x, w, tw);
                let v00 = input.at3(c, y0, x0).to_f64_();
                let v01 = input.at3(c, y0, x1).to_f64_();
                let v10 = input.at3(c, y1, x0).to_f64_();
                let v11 = input.at3(c, y1, x1).to_f64_();
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out.set3(c, y, x, S::from_f64(v));
            }
        }
    }
    Ok((
        out,
        ResizeCache {
            in_shape: input.shape().to_vec(),
            out_shape: vec![c_n, th, tw],
        },
    ))
}

/// Transpose of the resize: scatters each output gradient back through the
/// same four interpolation weights.
pub fn bilinear_resize_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    cache: &ResizeCache,
) -> Result<Tensor<S>> {
    if grad_out.shape() != cache.out_shape.as_slice() {
        return Err(Error::shape(format!(
            "resize backward shape {:?} vs cached {:?}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let (c_n, h, w) = (cache.in_shape[0], cache.in_shape[1], cache.in_shape[2]);
    let (th, tw) = (cache.out_shape[1], cache.out_shape[2]);
    let mut grad_in = Tensor::zeros(&cache.in_shape)?;
    for c in 0..c_n {
        for y in 0..th {
            let (y0, y1, fy) = resize_coords(y, h, th);
            for x in 0..tw {
                let (x0, x1, fx) = resize_coords(x, w, tw);
                let g = grad_out.at3(c, y, x).to_f64_();
                let add = |t: &mut Tensor<S>, yy: usize, xx: usize, wgt: f64| {
                    let cur = t.at3(c, yy, xx);
                    t.set3(c, yy, xx, cur + S::from_f64(g * wgt));
                };
                add(&mut grad_in, y0, x0, (1.0 - fy) * (1.0 - fx));
                if x1 != x0 {
                    add(&mut grad_in, y0, x1, (1.0 - fy) * fx);
                }
                if y1 != y0 {
                    add(&mut grad_in, y1, x0, fy * (1.0 - fx));
                }
                if y1 != y0 && x1 != x0 {
                    add(&mut grad_in, y1, x1, fy * fx);
                }
            }
        }
    }
    Ok(grad_in)
}

#[derive(Debug, Clone)]
pub struct ConcatCache {
    channel_counts: Vec<usize>,
    spatial: (usize, usize),
}

pub fn concat_channels<S: Scalar>(inputs: &[&Tensor<S>]) -> Result<(Tensor<S>, ConcatCache)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let (h, w) = (inputs[0].shape()[1], inputs[0].shape()[2]);
    let mut channel_counts = Vec::with_capacity(inputs.len());
    let mut total_c = 0;
    for t in inputs {
        if t.shape().len() != 3 {
            return Err(Error::shape(format!(
                "concat input must be (C,H,W), got {:?}",
                t.shape()
            )));
        }
        if t.shape()[1] != h || t.shape()[2] != w {
            return Err(Error::shape(format!(
                "spatial mismatch in concat: {}x{} vs {}x{}",
                t.shape()[1],
                t.shape()[2],
                h,
                w
            )));
        }
        channel_counts.push(t.shape()[0]);
        total_c += t.shape()[0];
    }
    let mut data = Vec::with_capacity(total_c * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Ok((
        Tensor::from_vec(&[total_c, h, w], data)?,
        ConcatCache {
            channel_counts,
            spatial: (h, w),
        },
    ))
}

pub fn concat_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    cache: &ConcatCache,
) -> Result<Vec<Tensor<S>>> {
    let (h, w) = cache.spatial;
    let total_c: usize = cache.channel_counts.iter().sum();
    if grad_out.shape() != [total_c, h, w] {
        return Err(Error::shape(format!(
            "concat backward shape {:?} vs expected [{},{},{}]",
            grad_out.shape(),
            total_c,
            h,
            w
        )));
    }
    let mut parts = Vec::with_capacity(cache.channel_counts.len());
    let mut offset = 0;
    for &c in &cache.channel_counts {
        let n = c * h * w;
        parts.push(Tensor::from_vec(
            &[c, h, w],
            grad_out.data()[offset..offset + n].to_vec(),
        )?);
        offset += n;
    }
    Ok(parts)
}

/// Numerically stable logistic: only ever exponentiates a non-positive value.
#[inline]
pub fn sigmoid_scalar(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    Tensor::from_vec(
        input.shape(),
        input
            .data()
            .iter()
            .map(|&a| S::from_f64(sigmoid_scalar(a.to_f64_())))
            .collect(),
    )
    .expect("same shape")
}
