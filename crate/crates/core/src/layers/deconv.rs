//! Transposed convolution with a 2×2 kernel at stride 2 and no bias.
//!
//! Every input pixel scatters into its own 2×2 output block, so the output is
//! exactly twice the input size and blocks never overlap.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::LayerGrads;

/// Weights are laid out `(c_in, c_out, 2, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvLayer {
    pub weight: Tensor,
}

impl DeconvLayer {
    pub fn new(weight: Tensor) -> Result<Self> {
        check_weight(weight.shape())?;
        Ok(DeconvLayer { weight })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        deconv_forward(input, &self.weight)
    }

    pub fn backward(&self, input: &Tensor, grad_output: &Tensor) -> Result<LayerGrads> {
        deconv_backward(input, &self.weight, grad_output)
    }
}

fn check_weight(ws: Shape) -> Result<()> {
    if ws.h != 2 || ws.w != 2 {
        return Err(Error::InvalidShape(format!(
            "deconv kernel must be 2x2, got {ws}"
        )));
    }
    Ok(())
}

fn check_input(is: Shape, ws: Shape) -> Result<()> {
    check_weight(ws)?;
    if is.c != ws.n {
        return Err(Error::ShapeMismatch(format!(
            "deconv expects {} input channels, got input {is}",
            ws.n
        )));
    }
    Ok(())
}

pub fn deconv_forward(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    check_input(is, ws)?;
    let (c_in, c_out) = (ws.n, ws.c);
    let (oh, ow) = (2 * is.h, 2 * is.w);
    let mut out = Tensor::zeros(Shape::new(is.n, c_out, oh, ow)?);
    let (src, wt) = (input.data(), weight.data());
    let dst = out.data_mut();
    for n in 0..is.n {
        for c in 0..c_in {
            let in_plane = &src[(n * c_in + c) * is.plane()..][..is.plane()];
            for o in 0..c_out {
                let k = &wt[(c * c_out + o) * 4..][..4];
                let out_plane = &mut dst[(n * c_out + o) * oh * ow..][..oh * ow];
                for y in 0..is.h {
                    for x in 0..is.w {
                        let v = in_plane[y * is.w + x];
                        let top = 2 * y * ow + 2 * x;
                        out_plane[top] += v * k[0];
                        out_plane[top + 1] += v * k[1];
                        out_plane[top + ow] += v * k[2];
                        out_plane[top + ow + 1] += v * k[3];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `grad_input` is the stride-2 correlation of `grad_output` with the kernel.
pub fn deconv_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_output: &Tensor,
) -> Result<LayerGrads> {
    let (is, ws, gs) = (input.shape(), weight.shape(), grad_output.shape());
    check_input(is, ws)?;
    let (c_in, c_out) = (ws.n, ws.c);
    let (oh, ow) = (2 * is.h, 2 * is.w);
    let expected = Shape::new(is.n, c_out, oh, ow)?;
    if gs != expected {
        return Err(Error::ShapeMismatch(format!(
            "deconv grad_output {gs}, forward output is {expected}"
        )));
    }
    let mut grad_input = Tensor::zeros(is);
    let mut grad_weight = Tensor::zeros(ws);
    let (src, wt, g) = (input.data(), weight.data(), grad_output.data());
    for n in 0..is.n {
        for c in 0..c_in {
            let in_off = (n * c_in + c) * is.plane();
            for o in 0..c_out {
                let kidx = (c * c_out + o) * 4;
                let k = &wt[kidx..][..4];
                let g_plane = &g[(n * c_out + o) * oh * ow..][..oh * ow];
                let mut gw = [0.0; 4];
                for y in 0..is.h {
                    for x in 0..is.w {
                        let top = 2 * y * ow + 2 * x;
                        let block = [
                            g_plane[top],
                            g_plane[top + 1],
                            g_plane[top + ow],
                            g_plane[top + ow + 1],
                        ];
                        let v = src[in_off + y * is.w + x];
                        let mut gi = 0.0;
                        for ((g, &b), &kt) in gw.iter_mut().zip(&block).zip(k.iter()) {
                            gi += b * kt;
                            *g += b * v;
                        }
                        grad_input.data_mut()[in_off + y * is.w + x] += gi;
                    }
                }
                for (dst, g) in grad_weight.data_mut()[kidx..kidx + 4].iter_mut().zip(gw) {
                    *dst += g;
                }
            }
        }
    }
    Ok(LayerGrads {
        grad_input,
        grad_weight: Some(grad_weight),
        grad_bias: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn single_pixel_scatters_kernel() {
        let x = Tensor::from_vec(shape(1, 1, 1, 1), vec![3.0]).unwrap();
        let w = Tensor::from_vec(shape(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = deconv_forward(&x, &w).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn doubles_spatial_extent() {
        let x = Tensor::zeros(shape(1, 3, 4, 4));
        let w = Tensor::zeros(shape(3, 5, 2, 2));
        assert_eq!(deconv_forward(&x, &w).unwrap().shape(), shape(1, 5, 8, 8));
        let x = Tensor::zeros(shape(2, 3, 1, 3));
        assert_eq!(deconv_forward(&x, &w).unwrap().shape(), shape(2, 5, 2, 6));
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(shape(1, 2, 4, 4));
        let w = Tensor::zeros(shape(3, 1, 2, 2));
        assert!(matches!(
            deconv_forward(&x, &w),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Stride-2 convolution with the same kernel; the deconv is its adjoint,
    /// so the deconv output is recovered one basis vector at a time.
    fn strided_conv(g: &Tensor, w: &Tensor) -> Tensor {
        let (gs, ws) = (g.shape(), w.shape());
        let mut out = Tensor::zeros(shape(gs.n, ws.n, gs.h / 2, gs.w / 2));
        for n in 0..gs.n {
            for c in 0..ws.n {
                for y in 0..gs.h / 2 {
                    for x in 0..gs.w / 2 {
                        let mut acc = 0.0;
                        for o in 0..ws.c {
                            for a in 0..2 {
                                for b in 0..2 {
                                    acc += w.get(c, o, a, b) * g.get(n, o, 2 * y + a, 2 * x + b);
                                }
                            }
                        }
                        out.set(n, c, y, x, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_adjoint_of_strided_conv() {
        let mut rng = Rng::seed(5);
        let x = Tensor::randn(shape(1, 2, 3, 3), &mut rng, 1.0).unwrap();
        let w = Tensor::randn(shape(2, 3, 2, 2), &mut rng, 1.0).unwrap();
        let y = deconv_forward(&x, &w).unwrap();
        let ys = y.shape();
        let mut oracle = Tensor::zeros(ys);
        for off in 0..ys.numel() {
            let mut e = Tensor::zeros(ys);
            e.data_mut()[off] = 1.0;
            // <deconv(x), e> = <x, conv(e)>
            oracle.data_mut()[off] = x.dot(&strided_conv(&e, &w)).unwrap();
        }
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12);

        let g = Tensor::randn(ys, &mut rng, 1.0).unwrap();
        let gi = deconv_backward(&x, &w, &g).unwrap().grad_input;
        assert!(gi.max_abs_diff(&strided_conv(&g, &w)).unwrap() < 1e-12);
        assert!((y.dot(&g).unwrap() - x.dot(&gi).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn all_ones_kernel_sums_block_gradient() {
        let x = Tensor::zeros(shape(1, 1, 2, 2));
        let w = Tensor::fill(shape(1, 1, 2, 2), 1.0);
        let g = Tensor::randn(shape(1, 1, 4, 4), &mut Rng::seed(6), 1.0).unwrap();
        let gi = deconv_backward(&x, &w, &g).unwrap().grad_input;
        for y in 0..2 {
            for xx in 0..2 {
                let block = g.get(0, 0, 2 * y, 2 * xx)
                    + g.get(0, 0, 2 * y, 2 * xx + 1)
                    + g.get(0, 0, 2 * y + 1, 2 * xx)
                    + g.get(0, 0, 2 * y + 1, 2 * xx + 1);
                assert!((gi.get(0, 0, y, xx) - block).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_grad_output() {
        let mut rng = Rng::seed(7);
        let x = Tensor::randn(shape(1, 2, 2, 2), &mut rng, 1.0).unwrap();
        let w = Tensor::randn(shape(2, 2, 2, 2), &mut rng, 1.0).unwrap();
        let grads = deconv_backward(&x, &w, &Tensor::zeros(shape(1, 2, 4, 4))).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_weight.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.is_none());
    }
}
