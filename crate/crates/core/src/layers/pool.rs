//! 2×2 max pooling at stride 1 or 2.
//!
//! Stride 1 pads one row and one column of −∞ at the bottom/right so the
//! output keeps the input's spatial size. Ties go to the first element of the
//! window in row-major order.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPoolLayer {
    stride: usize,
}

impl MaxPoolLayer {
    pub const KERNEL: usize = 2;

    pub fn new(stride: usize) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!(
                "max-pool stride must be 1 or 2, got {stride}"
            )));
        }
        Ok(MaxPoolLayer { stride })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self.stride {
            1 => Ok(input),
            _ => {
                if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) {
                    return Err(Error::ShapeMismatch(format!(
                        "stride-2 max-pool needs even spatial dims, got {input}"
                    )));
                }
                Shape::new(input.n, input.c, input.h / 2, input.w / 2)
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, PoolContext)> {
        maxpool_forward(input, self)
    }
}

/// Argmax routing saved by a forward call; consumed by [`maxpool_backward`].
#[derive(Debug, Clone)]
pub struct PoolContext {
    input_shape: Shape,
    output_shape: Shape,
    argmax: Vec<usize>,
}

impl PoolContext {
    /// Input offset selected for each output element.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

pub fn maxpool_forward(input: &Tensor, layer: &MaxPoolLayer) -> Result<(Tensor, PoolContext)> {
    let is = input.shape();
    let os = layer.output_shape(is)?;
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.numel());
    let src = input.data();
    let s = layer.stride;
    for n in 0..is.n {
        for c in 0..is.c {
            let base = (n * is.c + c) * is.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for dy in 0..MaxPoolLayer::KERNEL {
                        let iy = oy * s + dy;
                        if iy >= is.h {
                            continue;
                        }
                        for dx in 0..MaxPoolLayer::KERNEL {
                            let ix = ox * s + dx;
                            if ix >= is.w {
                                continue;
                            }
                            let off = base + iy * is.w + ix;
                            if best_at == usize::MAX || src[off] > best {
                                best = src[off];
                                best_at = off;
                            }
                        }
                    }
                    out.set(n, c, oy, ox, best);
                    argmax.push(best_at);
                }
            }
        }
    }
    Ok((
        out,
        PoolContext {
            input_shape: is,
            output_shape: os,
            argmax,
        },
    ))
}

/// Routes each output gradient to its argmax source; overlapping windows accumulate.
pub fn maxpool_backward(ctx: &PoolContext, grad_output: &Tensor) -> Result<Tensor> {
    if grad_output.shape() != ctx.output_shape {
        return Err(Error::ShapeMismatch(format!(
            "max-pool grad_output {}, forward output was {}",
            grad_output.shape(),
            ctx.output_shape
        )));
    }
    let mut grad_input = Tensor::zeros(ctx.input_shape);
    let gi = grad_input.data_mut();
    for (&src, &g) in ctx.argmax.iter().zip(grad_output.data()) {
        gi[src] += g;
    }
    Ok(grad_input)
}
