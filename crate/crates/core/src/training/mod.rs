//! Losses, optimizer, augmentation and the two-phase training driver.

mod augment;
mod loss;
mod optim;
mod trainer;

pub use augment::{crop_patches, patch_size, PATCHES_PER_IMAGE, PATCH_MULTIPLE};
pub use loss::{
    absolute_count_loss, density_loss, density_loss_batch, joint_loss, relative_count_loss,
    CountLossKind, JointLoss, LossSpec,
};
pub use optim::{lr_at, sgd_step, Momentum};
pub use trainer::{
    prepare_samples, train, train_model, write_loss_csv, CheckpointPolicy, LossRecord, Phase,
    PhaseSwitch, Sample, TrainConfig, TrainOutcome, LOSS_CSV_HEADER,
};
