//! DDPM with an ε-prediction UNet: schedule, network, training and sampling.

mod checkpoint;
pub mod nn;
mod optim;
mod prior;
mod sample;
mod schedule;
mod train;
mod unet;

pub use checkpoint::{
    write_loss_csv, CheckpointHeader, DiffusionCheckpoint, OptimizerState, TensorEntry,
    CHECKPOINT_FORMAT,
};
pub use optim::{learning_rate, AdamW, AdamWConfig};
pub use prior::{GaussianPrior, Preconditioned, MIN_PRIOR_STD};
pub use sample::{sample, sample_raw, EpsilonModel, ZeroModel};
pub use schedule::{make_beta_schedule, BetaSchedule};
pub use train::{split_indices, sustained_divergence, train, EpochLoss, TrainConfig, Trainer};
pub use unet::{timestep_embedding, UNet, UNetConfig};
