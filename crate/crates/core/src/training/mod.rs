//! Two-phase optimization: supervised + adversarial warm-up, prototype
//! bootstrap, then the full objective with per-batch pseudo-labels.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{parse_kv, TrainConfig};
pub use optim::{Adam, Sgd};
pub use trainer::{
    bootstrap_prototypes, generator_objective, phase1_step, phase2_step, predict, target_angles, train, AngleSummary,
    LossRow, SourceBatch, StepLosses, TrainOptions, TrainReport, TrainState, BEST_CHECKPOINT, LAST_CHECKPOINT,
    LOSS_CURVE, NAN_DUMP,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::numerics::NumericsError;
use crate::prototypes::PrototypeError;
use crate::pseudo_labels::LabelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint parse error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },
    #[error("checkpoint is missing or has a malformed {0}")]
    CheckpointContent(String),
    #[error("prototypes are not initialized; bootstrap them before a phase-2 step")]
    NoPrototypes,
    #[error("dataset has no {0}")]
    EmptyData(String),
    #[error("non-finite {what} at iteration {iteration}{}", dump.as_ref().map(|p| format!("; batch dumped to {}", p.display())).unwrap_or_default())]
    NonFinite {
        iteration: u64,
        what: String,
        dump: Option<PathBuf>,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for the numerical-abort class of failures.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Self::NonFinite { .. })
    }
}
