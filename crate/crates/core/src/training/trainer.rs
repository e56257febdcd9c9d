use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{AnnotatedImage, Dataset};
use crate::density::{downsample_sum, render_density, DensityMap, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::model::{
    build_model, crop_window, Checkpoint, ModelConfig, ModelGraph, ParamStore, OUTPUT_STRIDE,
};
use crate::tensor::{Rng, Tensor};

use super::augment::{crop_patches, PATCH_MULTIPLE};
use super::loss::{joint_loss, CountLossKind, LossSpec};
use super::optim::{lr_at, sgd_step, validate_schedule, Momentum};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Density loss only.
    DensityOnly = 1,
    /// Density plus weighted count loss.
    Joint = 2,
}

/// When phase 1 hands over to joint training.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSwitch {
    /// Epochs per window for the convergence test.
    pub window: usize,
    /// Switch once the mean epoch L_D of the latest window improves on the
    /// window before it by less than this fraction. `None` disables the test.
    pub min_rel_improvement: Option<f64>,
    /// Switch after this many phase-1 epochs regardless.
    pub max_epochs: Option<usize>,
}

impl Default for PhaseSwitch {
    fn default() -> Self {
        PhaseSwitch {
            window: 5,
            min_rel_improvement: Some(0.01),
            max_epochs: None,
        }
    }
}

impl PhaseSwitch {
    /// `epoch_losses` holds the mean L_D of every phase-1 epoch so far.
    fn should_switch(&self, epoch_losses: &[f64]) -> bool {
        if self.max_epochs.is_some_and(|m| epoch_losses.len() >= m) {
            return true;
        }
        let (Some(threshold), w) = (self.min_rel_improvement, self.window) else {
            return false;
        };
        if w == 0 || epoch_losses.len() < 2 * w {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let n = epoch_losses.len();
        let current = mean(&epoch_losses[n - w..]);
        let previous = mean(&epoch_losses[n - 2 * w..n - w]);
        if previous <= 0.0 {
            return true;
        }
        (previous - current) / previous < threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Also write `epoch_NNNN.ckpt` every this many epochs.
    pub every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub epochs: usize,
    pub density_weight: f64,
    pub count_weight: f64,
    pub count_loss: CountLossKind,
    pub phase1: PhaseSwitch,
    /// Gaussian width for ground-truth rendering.
    pub sigma: f64,
    /// Train on nine random patches per image instead of whole images.
    pub augment: bool,
    pub seed: u64,
    pub checkpoint: Option<CheckpointPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-6,
            lr_end: 1e-8,
            lr_milestones: vec![100, 200],
            momentum: 0.9,
            epochs: 250,
            density_weight: 1.0,
            count_weight: 0.1,
            count_loss: CountLossKind::Relative,
            phase1: PhaseSwitch::default(),
            sigma: DEFAULT_SIGMA,
            augment: true,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_schedule(self.lr_start, self.lr_end, &self.lr_milestones)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.density_weight >= 0.0 && self.count_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.checkpoint.as_ref().and_then(|c| c.every) == Some(0) {
            return Err(Error::Config("checkpoint interval must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn loss_spec(&self, phase: Phase) -> LossSpec {
        LossSpec {
            density_weight: self.density_weight,
            count_weight: match phase {
                Phase::DensityOnly => 0.0,
                Phase::Joint => self.count_weight,
            },
            count_loss: self.count_loss,
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub phase: Phase,
    pub density: f64,
    pub count: f64,
    pub joint: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,iteration,phase,density_loss,count_loss,joint_loss,lr";

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e}",
            r.epoch, r.iteration, r.phase as u8, r.density, r.count, r.joint, r.lr
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A training input with its ground truth at output resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub target: DensityMap,
}

/// Crops (or patches) each record and renders its target density.
pub fn prepare_samples(dataset: &Dataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<Sample>> {
    let mut records: Vec<AnnotatedImage> = Vec::new();
    for rec in &dataset.images {
        if cfg.augment {
            records.extend(crop_patches(rec, rng)?);
        } else {
            let (top, left, h, w) = crop_window(rec.height(), rec.width(), PATCH_MULTIPLE)
                .map_err(|e| Error::Data(format!("{}: {e}", rec.id)))?;
            records.push(rec.crop(top, left, h, w)?);
        }
    }
    records
        .into_iter()
        .map(|rec| {
            let full = render_density(rec.heads(), rec.height(), rec.width(), cfg.sigma)?;
            Ok(Sample {
                target: downsample_sum(&full, OUTPUT_STRIDE)?,
                image: rec.image().clone(),
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub history: Vec<LossRecord>,
    /// First joint-training epoch, if phase 2 was reached.
    pub phase2_epoch: Option<usize>,
    /// Parameters at the end of phase 1, if phase 2 was reached.
    pub phase1_params: Option<ParamStore>,
}

fn save_checkpoint(model: &ModelGraph, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Checkpoint::from_graph(model).save(&dir.join(name))
}

/// Density-only training until phase 1 converges, then joint training for
/// the remaining epochs. Batch size is 1; samples are visited in a
/// seed-determined order that is reshuffled every epoch.
pub fn train(dataset: &Dataset, model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = build_model(model_cfg, &mut Rng::seed(cfg.seed).fork())?;
    train_model(dataset, model, cfg)
}

/// [`train`] starting from an already initialized model.
pub fn train_model(
    dataset: &Dataset,
    mut model: ModelGraph,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.expect_non_empty()?;
    let mut rng = Rng::seed(cfg.seed);
    // The first stream belongs to weight initialization in `train`.
    let _ = rng.fork();
    let samples = prepare_samples(dataset, cfg, &mut rng.fork())?;
    let mut order_rng = rng.fork();
    let mut state = Momentum::new(model.params());

    let mut phase = Phase::DensityOnly;
    let mut phase1_epoch_losses = Vec::new();
    let mut phase2_epoch = None;
    let mut phase1_params = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.lr_start, cfg.lr_end, &cfg.lr_milestones);
        let spec = cfg.loss_spec(phase);
        order_rng.shuffle(&mut order);
        let mut epoch_density = 0.0;
        for &i in &order {
            let sample = &samples[i];
            let pred = model.forward(&sample.image)?;
            let loss = joint_loss(&pred, &sample.target, &spec)?;
            let iteration = history.len();
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    iteration,
                    epoch,
                    detail: format!(
                        "density loss {} count loss {} at sample {i}",
                        loss.density, loss.count
                    ),
                });
            }
            let grads = model.backward(&loss.grad_density, loss.grad_count)?;
            sgd_step(model.params_mut(), &grads, &mut state, lr, cfg.momentum)?;
            if !model.params().is_finite() {
                return Err(Error::NonFinite {
                    iteration,
                    epoch,
                    detail: format!("parameters overflowed after the update on sample {i}"),
                });
            }
            epoch_density += loss.density;
            history.push(LossRecord {
                epoch,
                iteration,
                phase,
                density: loss.density,
                count: loss.count,
                joint: loss.total,
                lr,
            });
        }

        if let Some(policy) = &cfg.checkpoint {
            if policy.every.is_some_and(|k| (epoch + 1) % k == 0) {
                save_checkpoint(&model, &policy.dir, &format!("epoch_{:04}.ckpt", epoch + 1))?;
            }
        }
        if phase == Phase::DensityOnly {
            phase1_epoch_losses.push(epoch_density / samples.len() as f64);
            if cfg.phase1.should_switch(&phase1_epoch_losses) {
                phase = Phase::Joint;
                phase2_epoch = Some(epoch + 1);
                phase1_params = Some(model.params().clone());
            }
        }
    }
    if let Some(policy) = &cfg.checkpoint {
        save_checkpoint(&model, &policy.dir, "final.ckpt")?;
    }
    Ok(TrainOutcome {
        model,
        history,
        phase2_epoch,
        phase1_params,
    })
}
