//! Density (Euclidean) loss and the count losses.

use std::fmt;
use std::str::FromStr;

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::tensor::Tensor;

/// `(1/N) Σ_n ‖pred_n − gt_n‖²` over the batch axis, with its gradient
/// `2 (pred − gt) / N`.
pub fn density_loss_batch(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    pred.expect_same_shape(gt, "density loss")?;
    let n = pred.shape().n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let d = p - g;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, Tensor::from_vec(pred.shape(), grad)?))
}

/// Single-image density loss.
pub fn density_loss(pred: &DensityMap, gt: &DensityMap) -> Result<(f64, Tensor)> {
    density_loss_batch(pred.grid(), gt.grid())
}

fn check_counts(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "count loss needs equal non-empty batches, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// `(1/N) Σ ((F − Y) / (Y + 1))²` and its derivative in each `F`.
pub fn relative_count_loss(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_counts(pred, gt)?;
    if let Some(y) = gt.iter().find(|&&y| y.is_nan() || y < 0.0) {
        return Err(Error::Data(format!(
            "ground-truth count must be non-negative, got {y}"
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&f, &y) in pred.iter().zip(gt) {
        let diff = f - y;
        let denom = (y + 1.0) * (y + 1.0);
        loss += diff * diff / denom;
        grad.push(2.0 * diff / denom / n);
    }
    Ok((loss / n, grad))
}

/// `(1/N) Σ (F − Y)²` and its derivative in each `F`.
pub fn absolute_count_loss(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_counts(pred, gt)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&f, &y) in pred.iter().zip(gt) {
        let diff = f - y;
        loss += diff * diff;
        grad.push(2.0 * diff / n);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountLossKind {
    None,
    Relative,
    Absolute,
}

impl CountLossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CountLossKind::None => "none",
            CountLossKind::Relative => "relative",
            CountLossKind::Absolute => "absolute",
        }
    }

    /// Loss and derivative for a single image; zero for `None`.
    pub fn evaluate(self, pred: f64, gt: f64) -> Result<(f64, f64)> {
        let (loss, grad) = match self {
            CountLossKind::None => return Ok((0.0, 0.0)),
            CountLossKind::Relative => relative_count_loss(&[pred], &[gt])?,
            CountLossKind::Absolute => absolute_count_loss(&[pred], &[gt])?,
        };
        Ok((loss, grad[0]))
    }
}

impl fmt::Display for CountLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CountLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CountLossKind::None),
            "relative" => Ok(CountLossKind::Relative),
            "absolute" => Ok(CountLossKind::Absolute),
            other => Err(Error::Config(format!(
                "unknown count loss {other:?} (expected none, relative or absolute)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub density_weight: f64,
    pub count_weight: f64,
    pub count_loss: CountLossKind,
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: f64,
    pub density: f64,
    /// Unweighted count term; reported even when its weight is zero.
    pub count: f64,
    pub grad_density: Tensor,
    pub grad_count: f64,
}

/// `density_weight · L_D + count_weight · L_Y`, with the ground-truth count
/// taken as the integral of `gt`.
pub fn joint_loss(pred: &Prediction, gt: &DensityMap, spec: &LossSpec) -> Result<JointLoss> {
    let (density, mut grad_density) = density_loss(&pred.density, gt)?;
    grad_density.scale(spec.density_weight);
    let (count, d_count) = spec.count_loss.evaluate(pred.count, gt.integral())?;
    Ok(JointLoss {
        total: spec.density_weight * density + spec.count_weight * count,
        density,
        count,
        grad_density,
        grad_count: spec.count_weight * d_count,
    })
}
