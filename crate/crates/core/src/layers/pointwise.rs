//! ReLU and channel concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    input.expect_same_shape(grad_output, "relu backward")?;
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::ShapeMismatch(format!(
            "cannot concat {sa} with {sb}"
        )));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w)?;
    let (chunk_a, chunk_b) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * chunk_a..][..chunk_a]);
        data.extend_from_slice(&b.data()[n * chunk_b..][..chunk_b]);
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: the first `channels` go left.
pub fn split_channels(t: &Tensor, channels: usize) -> Result<(Tensor, Tensor)> {
    let s = t.shape();
    if channels == 0 || channels >= s.c {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {s} at channel {channels}"
        )));
    }
    let sa = Shape::new(s.n, channels, s.h, s.w)?;
    let sb = Shape::new(s.n, s.c - channels, s.h, s.w)?;
    let (chunk_a, chunk_b) = (sa.c * s.plane(), sb.c * s.plane());
    let mut da = Vec::with_capacity(sa.numel());
    let mut db = Vec::with_capacity(sb.numel());
    for n in 0..s.n {
        let item = &t.data()[n * (chunk_a + chunk_b)..][..chunk_a + chunk_b];
        da.extend_from_slice(&item[..chunk_a]);
        db.extend_from_slice(&item[chunk_a..]);
    }
    Ok((Tensor::from_vec(sa, da)?, Tensor::from_vec(sb, db)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(shape(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&y), y);
        let g = Tensor::fill(x.shape(), 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn concat_shapes_and_round_trip() {
        let mut rng = Rng::seed(1);
        let a = Tensor::randn(shape(2, 2, 4, 4), &mut rng, 1.0).unwrap();
        let b = Tensor::randn(shape(2, 3, 4, 4), &mut rng, 1.0).unwrap();
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), shape(2, 5, 4, 4));
        assert_eq!(ab.get(1, 3, 2, 1), b.get(1, 1, 2, 1));
        let (a2, b2) = split_channels(&ab, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::zeros(shape(1, 2, 4, 4));
        let b = Tensor::zeros(shape(1, 2, 5, 4));
        assert!(matches!(
            concat_channels(&a, &b),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
