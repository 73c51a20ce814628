//! Two-stage segmentation + decision network for surface defect detection,
//! trained end to end with a dynamically balanced loss, gradient-flow
//! control, frequency-of-use negative sampling and distance-transform
//! weighting of positive pixels.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod pool;
pub mod sampling;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use data::{DatasetSplit, ImageSample, RotatedBox, SynthSpec};
pub use error::{Error, Result};
pub use eval::{aggregate_folds, average_precision, best_f_measure, EvalReport, FoldSummary};
pub use loss::{lambda_at, total_loss, LossBreakdown, MixSchedule, WeightMask};
pub use model::{build_model, ModelConfig, TwoStageModel};
pub use sampling::{build_epoch_stream, select_negatives, SamplerState};
pub use train::{ablate, train, TrainConfig, TrainHistory, Toggles};
