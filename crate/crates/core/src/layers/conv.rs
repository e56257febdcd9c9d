//! Same-padded, stride-1 2-D cross-correlation with odd square kernels.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::LayerGrads;

/// Convolution weights `(c_out, c_in, k, k)` and bias `(1, c_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        check_params(weight.shape(), bias.shape())?;
        Ok(ConvLayer { weight, bias })
    }

    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(c_out, c_in, kernel, kernel)?),
            Tensor::zeros(Shape::new(1, c_out, 1, 1)?),
        )
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv_forward(input, &self.weight, &self.bias)
    }

    pub fn backward(&self, input: &Tensor, grad_output: &Tensor) -> Result<LayerGrads> {
        conv_backward(input, &self.weight, grad_output)
    }
}

fn check_params(weight: Shape, bias: Shape) -> Result<()> {
    if weight.h != weight.w || weight.h.is_multiple_of(2) {
        return Err(Error::InvalidShape(format!(
            "conv kernel must be odd and square, got {weight}"
        )));
    }
    if bias.numel() != weight.n {
        return Err(Error::ShapeMismatch(format!(
            "conv bias {bias} does not match {} output channels",
            weight.n
        )));
    }
    Ok(())
}

fn check_input(input: Shape, weight: Shape) -> Result<()> {
    if input.c != weight.c {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got input {input}",
            weight.c
        )));
    }
    Ok(())
}

/// Rows `y` of the output whose source row `y + tap - pad` lies inside `0..len`.
#[inline]
fn valid_range(len: usize, tap: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(len);
    lo..hi.max(lo)
}

pub fn conv_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    check_params(ws, bias.shape())?;
    check_input(is, ws)?;
    let (c_in, c_out, k, h, w) = (ws.c, ws.n, ws.h, is.h, is.w);
    let pad = k / 2;
    let plane = is.plane();
    let mut out = Tensor::zeros(Shape::new(is.n, c_out, h, w)?);
    let (src, wt, b) = (input.data(), weight.data(), bias.data());
    let dst = out.data_mut();
    for n in 0..is.n {
        for o in 0..c_out {
            let out_plane = &mut dst[(n * c_out + o) * plane..][..plane];
            out_plane.fill(b[o]);
            for c in 0..c_in {
                let in_plane = &src[(n * c_in + c) * plane..][..plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((o * c_in + c) * k + ky) * k + kx];
                        let xs = valid_range(w, kx, pad);
                        for y in valid_range(h, ky, pad) {
                            let iy = y + ky - pad;
                            let orow = &mut out_plane[y * w..][..w];
                            let irow = &in_plane[iy * w..][..w];
                            for x in xs.clone() {
                                orow[x] += wv * irow[x + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_backward(input: &Tensor, weight: &Tensor, grad_output: &Tensor) -> Result<LayerGrads> {
    let (is, ws, gs) = (input.shape(), weight.shape(), grad_output.shape());
    check_input(is, ws)?;
    let expected = Shape::new(is.n, ws.n, is.h, is.w)?;
    if gs != expected {
        return Err(Error::ShapeMismatch(format!(
            "conv grad_output {gs}, forward output is {expected}"
        )));
    }
    let (c_in, c_out, k, h, w) = (ws.c, ws.n, ws.h, is.h, is.w);
    let pad = k / 2;
    let plane = is.plane();
    let mut grad_input = Tensor::zeros(is);
    let mut grad_weight = Tensor::zeros(ws);
    let mut grad_bias = Tensor::zeros(Shape::new(1, c_out, 1, 1)?);
    let (src, wt, g) = (input.data(), weight.data(), grad_output.data());
    for n in 0..is.n {
        for o in 0..c_out {
            let g_plane = &g[(n * c_out + o) * plane..][..plane];
            let mut acc = 0.0;
            for &v in g_plane {
                acc += v;
            }
            grad_bias.data_mut()[o] += acc;
            for c in 0..c_in {
                let in_off = (n * c_in + c) * plane;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * c_in + c) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let xs = valid_range(w, kx, pad);
                        let mut gw = 0.0;
                        for y in valid_range(h, ky, pad) {
                            let iy = y + ky - pad;
                            let grow = &g_plane[y * w..][..w];
                            let irow = &src[in_off + iy * w..][..w];
                            let girow = &mut grad_input.data_mut()[in_off + iy * w..][..w];
                            for x in xs.clone() {
                                let ix = x + kx - pad;
                                gw += grow[x] * irow[ix];
                                girow[ix] += wv * grow[x];
                            }
                        }
                        grad_weight.data_mut()[widx] += gw;
                    }
                }
            }
        }
    }
    Ok(LayerGrads {
        grad_input,
        grad_weight: Some(grad_weight),
        grad_bias: Some(grad_bias),
    })
}
