//! Forward and backward kernels for the layer types of the tracking network.
//!
//! Each forward call returns its output together with a context holding
//! whatever the matching backward call needs. Contexts are consumed by value,
//! so a context can only be used for one backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn rank_check<T: Element>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::invalid(
            op,
            format!("expected a rank-{rank} tensor, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Output side length of a convolution along one axis.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

#[derive(Debug)]
pub struct Conv2dCtx<'w, T: Element> {
    input_shape: [usize; 3],
    out_hw: (usize, usize),
    stride: usize,
    padding: usize,
    /// Lowered input, `[C_in * kH * kW, H' * W']` row-major.
    cols: Vec<T>,
    weight: &'w Tensor<T>,
}

impl<T: Element> Conv2dCtx<'_, T> {
    pub fn output_shape(&self) -> [usize; 3] {
        [self.weight.shape()[0], self.out_hw.0, self.out_hw.1]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// 2-D cross-correlation over a single `[C_in, H, W]` image with zero padding.
pub fn conv2d<'w, T: Element>(
    input: &Tensor<T>,
    weight: &'w Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Conv2dCtx<'w, T>)> {
    const OP: &str = "conv2d";
    rank_check(OP, input, 3)?;
    rank_check(OP, weight, 4)?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc_in != c_in {
        return Err(Error::invalid(
            OP,
            format!(
                "input {:?} has {c_in} channels but weight {:?} expects {wc_in}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    bias.expect_shape(OP, &[c_out])?;
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            OP,
            format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
            ),
        ));
    }
    let oh = conv_output_len(h, kh, stride, padding);
    let ow = conv_output_len(w, kw, stride, padding);
    let positions = oh * ow;
    let k_len = c_in * kh * kw;

    let cols = im2col(input.data(), [c_in, h, w], [kh, kw], stride, padding, (oh, ow));

    let mut out = vec![T::zero(); c_out * positions];
    let wd = weight.data();
    for (o, row) in out.chunks_exact_mut(positions).enumerate() {
        row.fill(bias.data()[o]);
        let w_row = &wd[o * k_len..(o + 1) * k_len];
        for (k, &wv) in w_row.iter().enumerate() {
            let col = &cols[k * positions..(k + 1) * positions];
            for (r, &c) in row.iter_mut().zip(col) {
                *r = *r + wv * c;
            }
        }
    }

    let ctx = Conv2dCtx {
        input_shape: [c_in, h, w],
        out_hw: (oh, ow),
        stride,
        padding,
        cols,
        weight,
    };
    Ok((Tensor::new(vec![c_out, oh, ow], out)?, ctx))
}

fn im2col<T: Element>(
    input: &[T],
    [c_in, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let positions = oh * ow;
    let mut cols = vec![T::zero(); c_in * kh * kw * positions];
    let mut k = 0;
    for c in 0..c_in {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let dst = &mut cols[k * positions..(k + 1) * positions];
                for y in 0..oh {
                    let iy = (y * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[y * ow..(y + 1) * ow];
                    for (x, d) in dst_row.iter_mut().enumerate() {
                        let ix = (x * stride + j) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                k += 1;
            }
        }
    }
    cols
}

fn col2im_accumulate<T: Element>(
    cols: &[T],
    out: &mut [T],
    [c_in, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) {
    let positions = oh * ow;
    let mut k = 0;
    for c in 0..c_in {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let src = &cols[k * positions..(k + 1) * positions];
                for y in 0..oh {
                    let iy = (y * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[y * ow..(y + 1) * ow];
                    for (x, &g) in src_row.iter().enumerate() {
                        let ix = (x * stride + j) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + g;
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

pub fn conv2d_backward<T: Element>(
    ctx: Conv2dCtx<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let mut weight = Tensor::zeros(ctx.weight.shape().to_vec());
    let mut bias = Tensor::zeros(vec![ctx.weight.shape()[0]]);
    let input = conv2d_backward_into(ctx, grad_out, &mut weight, &mut bias, true)?
        .expect("input gradient requested");
    Ok(Conv2dGrads {
        input,
        weight,
        bias,
    })
}

/// Accumulates parameter gradients into `grad_weight` / `grad_bias` and
/// returns the input gradient when `want_input` is set.
pub(crate) fn conv2d_backward_into<T: Element>(
    ctx: Conv2dCtx<'_, T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    const OP: &str = "conv2d_backward";
    grad_out.expect_shape(OP, &ctx.output_shape())?;
    grad_weight.expect_shape(OP, ctx.weight.shape())?;
    grad_bias.expect_shape(OP, &[ctx.weight.shape()[0]])?;

    let c_out = ctx.weight.shape()[0];
    let (kh, kw) = (ctx.weight.shape()[2], ctx.weight.shape()[3]);
    let positions = ctx.out_hw.0 * ctx.out_hw.1;
    let k_len = ctx.input_shape[0] * kh * kw;
    let g = grad_out.data();

    for o in 0..c_out {
        let g_row = &g[o * positions..(o + 1) * positions];
        let gb = &mut grad_bias.data_mut()[o];
        *gb = *gb + g_row.iter().copied().sum::<T>();
        let gw_row = &mut grad_weight.data_mut()[o * k_len..(o + 1) * k_len];
        for (k, gw) in gw_row.iter_mut().enumerate() {
            let col = &ctx.cols[k * positions..(k + 1) * positions];
            let dot = g_row
                .iter()
                .zip(col)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            *gw = *gw + dot;
        }
    }

    if !want_input {
        return Ok(None);
    }

    let mut grad_cols = vec![T::zero(); k_len * positions];
    let wd = ctx.weight.data();
    for o in 0..c_out {
        let g_row = &g[o * positions..(o + 1) * positions];
        for k in 0..k_len {
            let wv = wd[o * k_len + k];
            let dst = &mut grad_cols[k * positions..(k + 1) * positions];
            for (d, &gv) in dst.iter_mut().zip(g_row) {
                *d = *d + wv * gv;
            }
        }
    }
    let [c_in, h, w] = ctx.input_shape;
    let mut grad_input = vec![T::zero(); c_in * h * w];
    col2im_accumulate(
        &grad_cols,
        &mut grad_input,
        ctx.input_shape,
        [kh, kw],
        ctx.stride,
        ctx.padding,
        ctx.out_hw,
    );
    Ok(Some(Tensor::new(ctx.input_shape.to_vec(), grad_input)?))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReluCtx {
    shape: Vec<usize>,
    active: Vec<bool>,
}

pub fn relu<T: Element>(input: &Tensor<T>) -> (Tensor<T>, ReluCtx) {
    let active: Vec<bool> = input.data().iter().map(|&v| v > T::zero()).collect();
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    (
        out,
        ReluCtx {
            shape: input.shape().to_vec(),
            active,
        },
    )
}

/// The derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Element>(ctx: ReluCtx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("relu_backward", &ctx.shape)?;
    let data = grad_out
        .data()
        .iter()
        .zip(&ctx.active)
        .map(|(&g, &a)| if a { g } else { T::zero() })
        .collect();
    Tensor::new(ctx.shape, data)
}

// ---------------------------------------------------------------------------
// Max pooling, 2x2 window, stride 2
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct MaxPoolCtx {
    input_shape: [usize; 3],
    /// Flat input index of the winning element for each output element.
    argmax: Vec<usize>,
}

pub fn maxpool2d<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCtx)> {
    const OP: &str = "maxpool2d";
    rank_check(OP, input, 3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            OP,
            format!("2x2 pooling needs even height and width, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let top = base + 2 * y * w + 2 * xo;
                // row-major window order; strict `>` keeps the first maximum
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, oh, ow], out)?,
        MaxPoolCtx {
            input_shape: [c, h, w],
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Element>(ctx: MaxPoolCtx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = ctx.input_shape;
    grad_out.expect_shape("maxpool2d_backward", &[c, h / 2, w / 2])?;
    let mut grad = vec![T::zero(); c * h * w];
    for (&idx, &g) in ctx.argmax.iter().zip(grad_out.data()) {
        grad[idx] = grad[idx] + g;
    }
    Tensor::new(ctx.input_shape.to_vec(), grad)
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct LinearCtx<'w, T: Element> {
    input: Vec<T>,
    weight: &'w Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear<'w, T: Element>(
    input: &Tensor<T>,
    weight: &'w Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LinearCtx<'w, T>)> {
    const OP: &str = "linear";
    rank_check(OP, input, 1)?;
    rank_check(OP, weight, 2)?;
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != n_in {
        return Err(Error::invalid(
            OP,
            format!(
                "input {:?} does not match weight {:?}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    bias.expect_shape(OP, &[n_out])?;
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(n_in)
        .zip(bias.data())
        .map(|(row, &b)| row.iter().zip(x).fold(T::zero(), |acc, (&w, &v)| acc + w * v) + b)
        .collect();
    Ok((
        Tensor::new(vec![n_out], out)?,
        LinearCtx {
            input: x.to_vec(),
            weight,
        },
    ))
}

pub fn linear_backward<T: Element>(
    ctx: LinearCtx<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let mut weight = Tensor::zeros(ctx.weight.shape().to_vec());
    let mut bias = Tensor::zeros(vec![ctx.weight.shape()[0]]);
    let input = linear_backward_into(ctx, grad_out, &mut weight, &mut bias)?;
    Ok(LinearGrads {
        input,
        weight,
        bias,
    })
}

pub(crate) fn linear_backward_into<T: Element>(
    ctx: LinearCtx<'_, T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "linear_backward";
    let (n_out, n_in) = (ctx.weight.shape()[0], ctx.weight.shape()[1]);
    grad_out.expect_shape(OP, &[n_out])?;
    grad_weight.expect_shape(OP, ctx.weight.shape())?;
    grad_bias.expect_shape(OP, &[n_out])?;

    let g = grad_out.data();
    let mut grad_input = vec![T::zero(); n_in];
    let rows = ctx.weight.data().chunks_exact(n_in);
    let grad_rows = grad_weight.data_mut().chunks_exact_mut(n_in);
    for (((&go, w_row), gw_row), gb) in g.iter().zip(rows).zip(grad_rows).zip(grad_bias.data_mut()) {
        *gb = *gb + go;
        if go == T::zero() {
            continue;
        }
        for ((gw, gi), (&w, &x)) in gw_row
            .iter_mut()
            .zip(grad_input.iter_mut())
            .zip(w_row.iter().zip(&ctx.input))
        {
            *gw = *gw + go * x;
            *gi = *gi + go * w;
        }
    }
    Tensor::new(vec![n_in], grad_input)
}

// ---------------------------------------------------------------------------
// Inverted dropout
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct DropoutCtx<T: Element> {
    shape: Vec<usize>,
    /// Per-element multiplier: `0` or `1 / (1 - rate)`. `None` in eval mode.
    scale: Option<Vec<T>>,
}

pub fn dropout<T: Element, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutCtx<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must lie in [0, 1), got {rate}"),
        ));
    }
    let shape = input.shape().to_vec();
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), DropoutCtx { shape, scale: None }));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let out = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| v * s)
        .collect();
    Ok((Tensor::new(shape.clone(), out)?, DropoutCtx { shape, scale: Some(scale) }))
}

pub fn dropout_backward<T: Element>(ctx: DropoutCtx<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("dropout_backward", &ctx.shape)?;
    match ctx.scale {
        None => Ok(grad_out.clone()),
        Some(scale) => {
            let data = grad_out
                .data()
                .iter()
                .zip(&scale)
                .map(|(&g, &s)| g * s)
                .collect();
            Tensor::new(ctx.shape, data)
        }
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    target.expect_shape("mse_loss", pred.shape())?;
    let n = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss = loss + d * d;
            two * d / n
        })
        .collect();
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}
