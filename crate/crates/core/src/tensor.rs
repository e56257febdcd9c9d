//! Dense 4-D tensors in (batch, channels, height, width) order.
//!
//! Storage is a contiguous row-major `f64` buffer. Reductions scan the buffer
//! front to back so results are bitwise reproducible.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Extents of a 4-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape { n, c, h, w };
        if shape.dims().contains(&0) {
            return Err(Error::InvalidShape(format!("zero extent in {shape}")));
        }
        Ok(shape)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Row-major offset of `(n, c, h, w)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Inverse of [`Shape::offset`].
    pub fn index(&self, offset: usize) -> (usize, usize, usize, usize) {
        debug_assert!(offset < self.numel());
        let w = offset % self.w;
        let rest = offset / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        (rest / self.c, rest % self.c, h, w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn fill(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::fill(shape, 0.0)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} values do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// I.i.d. Gaussian samples with mean 0 and the given standard deviation.
    pub fn randn(shape: Shape, rng: &mut Rng, stddev: f64) -> Result<Self> {
        if !stddev.is_finite() || stddev <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "stddev must be positive, got {stddev}"
            )));
        }
        let data = (0..shape.numel()).map(|_| rng.normal() * stddev).collect();
        Ok(Tensor { shape, data })
    }

    /// Uniform samples on `[lo, hi)`.
    pub fn rand_uniform(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Self {
        let data = (0..shape.numel()).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let off = self.shape.offset(n, c, h, w);
        self.data[off] = value;
    }

    /// Sum of all elements, accumulated in storage order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial window `[top, top + height) × [left, left + width)` of every plane.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        let s = self.shape;
        if top + height > s.h || left + width > s.w {
            return Err(Error::InvalidShape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {s}"
            )));
        }
        let out_shape = Shape::new(s.n, s.c, height, width)?;
        let mut data = Vec::with_capacity(out_shape.numel());
        for p in 0..s.n * s.c {
            for y in top..top + height {
                let row = p * s.plane() + y * s.w;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Seeded random source used for initialization, augmentation and synthesis.
///
/// Backed by ChaCha8, whose output stream is fixed by the seed on every
/// platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from this one.
    pub fn fork(&mut self) -> Self {
        Rng::seed(self.inner.random())
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer on `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
