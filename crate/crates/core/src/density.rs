//! Ground-truth density maps: a normalized Gaussian stamped at every head,
//! plus block-sum reduction to the network's output grid.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Default kernel width in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Head center in continuous pixel coordinates, origin top-left.
///
/// Serialized as a two-element array `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct HeadPoint {
    pub x: f64,
    pub y: f64,
}

impl HeadPoint {
    pub fn new(x: f64, y: f64) -> Self {
        HeadPoint { x, y }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }

    /// Nearest pixel `(row, col)`, clamped into the image.
    pub fn pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let row = (self.y.round() as usize).min(height - 1);
        let col = (self.x.round() as usize).min(width - 1);
        (row, col)
    }

    fn scan_order(a: &HeadPoint, b: &HeadPoint) -> Ordering {
        a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x))
    }
}

impl From<[f64; 2]> for HeadPoint {
    fn from([x, y]: [f64; 2]) -> Self {
        HeadPoint { x, y }
    }
}

impl From<HeadPoint> for [f64; 2] {
    fn from(p: HeadPoint) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(dy, dx)` from the center, both in `-radius..=radius`.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Radius covering three standard deviations.
pub fn default_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

pub fn make_kernel(sigma: f64, radius: usize) -> Result<GaussianKernel> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let r = radius as isize;
    let denom = 2.0 * sigma * sigma;
    let mut weights = Vec::with_capacity((2 * radius + 1).pow(2));
    for i in -r..=r {
        for j in -r..=r {
            weights.push((-((i * i + j * j) as f64) / denom).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(GaussianKernel {
        sigma,
        radius,
        weights,
    })
}

/// A single-plane non-negative field whose integral is a head count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    grid: Tensor,
}

impl DensityMap {
    pub fn new(grid: Tensor) -> Result<Self> {
        let s = grid.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::InvalidShape(format!(
                "density map must be (1, 1, H, W), got {s}"
            )));
        }
        Ok(DensityMap { grid })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros(Shape::new(1, 1, height, width)?))
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_grid(self) -> Tensor {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.shape().h
    }

    pub fn width(&self) -> usize {
        self.grid.shape().w
    }

    pub fn integral(&self) -> f64 {
        self.grid.sum()
    }

    /// 16-bit binary PGM scaled so the maximum maps to 65535. The comment
    /// line records `scale`, the density value of one grey level.
    pub fn to_pgm16(&self) -> Vec<u8> {
        let max = self.grid.data().iter().cloned().fold(0.0, f64::max);
        let scale = max / 65535.0;
        let mut out = format!(
            "P5\n# scale={scale:e}\n{} {}\n65535\n",
            self.width(),
            self.height()
        )
        .into_bytes();
        for &v in self.grid.data() {
            let level = if max > 0.0 {
                (v.max(0.0) / max * 65535.0).round() as u16
            } else {
                0
            };
            out.extend_from_slice(&level.to_be_bytes());
        }
        out
    }

    pub fn write_pgm16(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm16())
            .map_err(|e| Error::io(path, e))
    }
}

/// Stamps one clipped, renormalized kernel per head.
///
/// Heads are processed in (y, x) order so the result does not depend on the
/// order of `points`.
pub fn render_density(
    points: &[HeadPoint],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<DensityMap> {
    let kernel = make_kernel(sigma, default_radius(sigma))?;
    render_with_kernel(points, height, width, &kernel)
}

pub fn render_with_kernel(
    points: &[HeadPoint],
    height: usize,
    width: usize,
    kernel: &GaussianKernel,
) -> Result<DensityMap> {
    let mut map = DensityMap::zeros(height, width)?;
    if let Some((i, p)) = points
        .iter()
        .enumerate()
        .find(|(_, p)| !p.in_bounds(height, width))
    {
        return Err(Error::Data(format!(
            "head #{i} at ({}, {}) lies outside the {width}x{height} image",
            p.x, p.y
        )));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(HeadPoint::scan_order);

    let r = kernel.radius() as isize;
    let (h, w) = (height as isize, width as isize);
    let grid = map.grid.data_mut();
    for p in &sorted {
        let (row, col) = p.pixel(height, width);
        let (row, col) = (row as isize, col as isize);
        let (y0, y1) = ((row - r).max(0), (row + r).min(h - 1));
        let (x0, x1) = ((col - r).max(0), (col + r).min(w - 1));
        let mut mass = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                mass += kernel.at(y - row, x - col);
            }
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                grid[(y * w + x) as usize] += kernel.at(y - row, x - col) / mass;
            }
        }
    }
    Ok(map)
}

/// Sums each `factor`×`factor` block into one cell.
pub fn downsample_sum(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "downsample factor must be ≥ 1".into(),
        ));
    }
    let (h, w) = (map.height(), map.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} density map is not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = DensityMap::zeros(oh, ow)?;
    let src = map.grid.data();
    let dst = out.grid.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    acc += src[y * w + x];
                }
            }
            dst[oy * ow + ox] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn radius_zero_kernel() {
        let k = make_kernel(2.0, 0).unwrap();
        assert_eq!(k.weights(), &[1.0]);
    }

    #[test]
    fn kernel_normalized_and_symmetric() {
        for &(s, r) in &[(0.5, 3), (1.0, 1), (4.0, 12), (7.3, 5)] {
            let k = make_kernel(s, r).unwrap();
            let total: f64 = k.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            let ri = r as isize;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    assert_eq!(k.at(dy, dx), k.at(-dy, -dx));
                }
            }
        }
    }

    #[test]
    fn kernel_center_value() {
        // 1 / (1 + 4e^{-1/2} + 4e^{-1})
        let expect = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        let k = make_kernel(1.0, 1).unwrap();
        assert!((k.at(0, 0) - expect).abs() < 1e-15);
        assert!((k.at(0, 0) - 0.2042).abs() < 1e-4);
    }

    #[test]
    fn kernel_rejects_bad_sigma() {
        assert!(matches!(
            make_kernel(0.0, 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_kernel(-1.0, 2).is_err());
    }

    #[test]
    fn empty_points_give_zero_map() {
        let m = render_density(&[], 16, 16, 4.0).unwrap();
        assert_eq!(m.integral(), 0.0);
    }

    #[test]
    fn interior_head_integrates_to_one() {
        let m = render_density(&[HeadPoint::new(32.0, 32.0)], 64, 64, 4.0).unwrap();
        assert!((m.integral() - 1.0).abs() < 1e-9);
        assert!(m.grid().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn border_heads_are_renormalized() {
        let mut rng = Rng::seed(37);
        let mut pts: Vec<HeadPoint> = (0..37)
            .map(|_| HeadPoint::new(rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)))
            .collect();
        pts[0] = HeadPoint::new(0.0, 0.0);
        pts[1] = HeadPoint::new(63.9, 10.0);
        pts[2] = HeadPoint::new(5.0, 63.2);
        let m = render_density(&pts, 64, 64, 4.0).unwrap();
        assert!((m.integral() - 37.0).abs() < 1e-6);
        // Independent per-head sums agree with the joint render.
        let per_head: f64 = pts
            .iter()
            .map(|p| render_density(&[*p], 64, 64, 4.0).unwrap().integral())
            .sum();
        assert!((per_head - 37.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_head_named() {
        let err = render_density(
            &[HeadPoint::new(1.0, 1.0), HeadPoint::new(16.0, 0.0)],
            16,
            16,
            4.0,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("#1") && msg.contains("(16, 0)"), "{msg}");
    }

    #[test]
    fn downsample_cases() {
        let ones = DensityMap::new(Tensor::fill(Shape::new(1, 1, 8, 8).unwrap(), 1.0)).unwrap();
        let d = downsample_sum(&ones, 8).unwrap();
        assert_eq!((d.height(), d.width()), (1, 1));
        assert_eq!(d.grid().data(), &[64.0]);
        assert_eq!(downsample_sum(&ones, 1).unwrap(), ones);
        let r = DensityMap::new(Tensor::rand_uniform(
            Shape::new(1, 1, 16, 16).unwrap(),
            &mut Rng::seed(1),
            0.0,
            1.0,
        ))
        .unwrap();
        let d = downsample_sum(&r, 8).unwrap();
        assert!((d.integral() - r.integral()).abs() < 1e-12);
        assert!(matches!(
            downsample_sum(&r, 3),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pgm16_header_and_scale() {
        let m = render_density(&[HeadPoint::new(4.0, 4.0)], 8, 8, 1.0).unwrap();
        let bytes = m.to_pgm16();
        let text = String::from_utf8_lossy(&bytes[..60]).to_string();
        assert!(text.starts_with("P5\n# scale="), "{text}");
        assert!(text.contains("\n8 8\n65535\n"));
        assert_eq!(bytes.len(), text.find("65535\n").unwrap() + 6 + 8 * 8 * 2);
    }

    proptest! {
        #[test]
        fn count_is_conserved(pts in prop::collection::vec((0.0f64..48.0, 0.0f64..40.0), 0..30)) {
            let pts: Vec<HeadPoint> = pts.into_iter().map(|(x, y)| HeadPoint::new(x, y)).collect();
            let m = render_density(&pts, 40, 48, 4.0).unwrap();
            prop_assert!((m.integral() - pts.len() as f64).abs() < 1e-6);
            let d = downsample_sum(&m, 8).unwrap();
            prop_assert!((d.integral() - m.integral()).abs() <= 1e-12 * m.integral().max(1.0));
        }

        #[test]
        fn render_is_permutation_invariant(
            pts in prop::collection::vec((0.0f64..32.0, 0.0f64..32.0), 1..20),
            seed in any::<u64>(),
        ) {
            let pts: Vec<HeadPoint> = pts.into_iter().map(|(x, y)| HeadPoint::new(x, y)).collect();
            let mut shuffled = pts.clone();
            Rng::seed(seed).shuffle(&mut shuffled);
            let a = render_density(&pts, 32, 32, 2.0).unwrap();
            let b = render_density(&shuffled, 32, 32, 2.0).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
