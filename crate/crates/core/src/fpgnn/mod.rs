//! The physics-guided water-mask network: model assembly, the
//! correlation loss with its activity regularizers, the stratified split,
//! the training loop and inference.

mod config;
mod loss;
mod model;
mod split;
mod train;

pub use config::{DryPatch, EarlyStop, RegWeights, TrainConfig};
pub use loss::{activity_regularizers, pearson_loss, RegTerms};
pub use model::{infer, FpgnnModel, Normalization, PreparedInput};
pub use split::{split_indices, stratified_split};
pub use train::{read_loss_csv, train, training_objective, write_loss_csv, LossReport, TrainOutcome};

pub use crate::mask::{harden, SoftMask};

use thiserror::Error;

use crate::autodiff::checkpoint::CheckpointError;
use crate::autodiff::NnError;
use crate::raster::RasterError;

/// Stabilizer added under both square roots of the correlation during training.
pub const PEARSON_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FpgnnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("correlation undefined: {0} has zero variance")]
    DegenerateVariance(&'static str),
    #[error("unlearnable series: {0}")]
    Unlearnable(String),
    #[error("series has {len} scenes, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("input is {found_h}x{found_w}, model was trained on {height}x{width}")]
    ShapeMismatch { height: usize, width: usize, found_h: usize, found_w: usize },
    #[error("input has no valid pixels")]
    AllNodata,
    #[error("loss csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = FpgnnError> = std::result::Result<T, E>;
