//! Count metrics, per-image reports and k-fold splitting.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{AnnotatedImage, Dataset};
use crate::error::{Error, Result};
use crate::model::{crop_window, ModelGraph};
use crate::tensor::Rng;

/// Mean absolute error and root mean squared error.
pub fn compute_metrics(predicted: &[f64], ground_truth: &[f64]) -> Result<(f64, f64)> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground-truth counts",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Data(
            "cannot compute metrics over zero images".into(),
        ));
    }
    let n = predicted.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&p, &g) in predicted.iter().zip(ground_truth) {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub id: String,
    pub predicted: f64,
    /// Heads remaining after the input was cropped to the network multiple.
    pub ground_truth: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Result<Self> {
        let pred: Vec<f64> = records.iter().map(|r| r.predicted).collect();
        let gt: Vec<f64> = records.iter().map(|r| r.ground_truth).collect();
        let (mae, mse) = compute_metrics(&pred, &gt)?;
        Ok(EvalReport {
            n: records.len(),
            records,
            mae,
            mse,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,predicted,ground_truth,abs_error\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{}",
                r.id, r.predicted, r.ground_truth, r.abs_error
            )
            .unwrap();
        }
        writeln!(out, "# n={} mae={} mse={}", self.n, self.mae, self.mse).unwrap();
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "n": self.n, "mae": self.mae, "mse": self.mse })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Center-crops each image to a multiple of `multiple` and scores the
/// predictor's count against the heads that survive the crop.
pub fn evaluate_with<F>(dataset: &Dataset, multiple: usize, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&AnnotatedImage) -> Result<f64>,
{
    dataset.expect_non_empty()?;
    let mut records = Vec::with_capacity(dataset.len());
    for rec in &dataset.images {
        let (top, left, h, w) = crop_window(rec.height(), rec.width(), multiple)
            .map_err(|e| Error::Data(format!("{}: {e}", rec.id)))?;
        let cropped = rec.crop(top, left, h, w)?;
        let predicted = predict(&cropped)?;
        let ground_truth = cropped.count() as f64;
        records.push(EvalRecord {
            id: rec.id.clone(),
            predicted,
            ground_truth,
            abs_error: (predicted - ground_truth).abs(),
        });
    }
    EvalReport::from_records(records)
}

pub fn evaluate(model: &mut ModelGraph, dataset: &Dataset) -> Result<EvalReport> {
    let multiple = model.config().variant.input_multiple().max(16);
    evaluate_with(dataset, multiple, |rec| {
        Ok(model.forward(rec.image())?.count)
    })
}

/// Shuffled k-fold split; returns `(train, test)` index lists per fold.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("need 2 ≤ k ≤ {n}, got k={k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::seed(seed).shuffle(&mut order);
    Ok((0..k)
        .map(|f| {
            let lo = f * n / k;
            let hi = (f + 1) * n / k;
            let test = order[lo..hi].to_vec();
            let train = order[..lo].iter().chain(&order[hi..]).copied().collect();
            (train, test)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use proptest::prelude::*;

    #[test]
    fn metric_values() {
        let (mae, mse) = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((mae, mse), (0.0, 0.0));
        let (mae, mse) = compute_metrics(&[0.0, 4.0], &[3.0, 0.0]).unwrap();
        assert_eq!(mae, 3.5);
        assert!((mse - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(compute_metrics(&[], &[]), Err(Error::Data(_))));
        assert!(compute_metrics(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_bounds_mae(pairs in prop::collection::vec((-50.0f64..50.0, 0.0f64..50.0), 1..40)) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let (mae, mse) = compute_metrics(&p, &g).unwrap();
            prop_assert!(mse + 1e-12 >= mae);
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.reverse();
            let p2: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let g2: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            let (mae2, mse2) = compute_metrics(&p2, &g2).unwrap();
            prop_assert!((mae - mae2).abs() < 1e-9 && (mse - mse2).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_predictor_scores_zero() {
        let ds = synth_generate(&SynthSpec {
            seed: 3,
            n_images: 4,
            height: 40,
            width: 52,
            min_count: 3,
            max_count: 9,
        })
        .unwrap();
        let report = evaluate_with(&ds, 16, |rec| Ok(rec.count() as f64)).unwrap();
        assert!(report.mae < 1e-6);
        assert_eq!(report.n, 4);
        let csv = report.to_csv();
        assert!(csv.starts_with("id,predicted,ground_truth,abs_error\n"));
        assert_eq!(csv.lines().count(), 6);
        let offset = evaluate_with(&ds, 16, |rec| Ok(rec.count() as f64 + 2.0)).unwrap();
        assert!((offset.mae - 2.0).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_indices() {
        let folds = kfold_split(10, 3, 7).unwrap();
        let mut seen: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for (train, test) in &folds {
            assert_eq!(train.len() + test.len(), 10);
            assert!(test.iter().all(|i| !train.contains(i)));
        }
        assert!(kfold_split(3, 5, 0).is_err());
        assert_eq!(kfold_split(10, 3, 7).unwrap(), folds);
    }
}
