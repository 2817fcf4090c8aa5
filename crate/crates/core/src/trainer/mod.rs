//! Two-stage training pipeline.
//!
//! Stage one pretrains a small convolutional encoder on multi-label findings.
//! Stage two freezes it and fits a two-layer binary head on its features,
//! optionally regularized with FairKL on the head's hidden activations.
//! Cross-validation drives stage two over fold assignments.

pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod encoder;
pub mod head;
pub mod pretrain;
pub mod sampler;

use thiserror::Error;

pub use config::{cosine_lr_schedule, SamplerKind, TrainConfig};
pub use cv::{cross_validate, CvPrediction, CvReport, MethodRow, MetricTable};
pub use encoder::{extract_features, fit_to_encoder, EncoderCheckpoint, SmallCnn};
pub use head::{train_covid_head, CurveRow, HeadCheckpoint, HeadModel, TrainingCurve};
pub use pretrain::{pretrain_findings, FindingsDataset, PretrainReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; recent losses {trace:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        trace: Vec<f64>,
    },
    #[error("findings vocabulary mismatch: expected {expected:?}, got {got:?}")]
    VocabularyMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("image {index} is {width}x{height}, encoder expects {side}x{side}")]
    InputSize {
        index: usize,
        width: usize,
        height: usize,
        side: usize,
    },
    #[error("feature dimension {got} does not match the expected {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("training set has a single class ({0} records); both labels are required")]
    SingleClass(usize),
    #[error("head was trained on encoder {expected}, but encoder {got} was supplied")]
    ParentMismatch { expected: String, got: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Bias(#[from] crate::biascore::BiasError),
}
