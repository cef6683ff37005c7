//! Sub-adjacent attention transformer for unsupervised multivariate
//! time-series anomaly detection.
//!
//! The pipeline: [`data`] loads or synthesizes a series and standardizes it,
//! [`train`] fits a [`model::Model`] on non-overlapping windows with a loss
//! that rewards attention mass in each point's sub-adjacent neighbourhood,
//! [`score`] turns reconstruction error and attention contribution into
//! per-timestep anomaly scores, and [`eval`] measures them with best-F1
//! thresholds, point adjustment and ROC-AUC.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod score;
pub mod train;

pub use attention::{AttentionState, MappingConfig, MappingKind, SubAdjacentSpan};
pub use data::{SyntheticSpec, TimeSeriesDataset};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{Model, ModelConfig, ModelParams};
pub use numcore::{Tape, Tensor, Var};
pub use score::{ScoreConfig, ScoreMode, ScoreSeries};
pub use train::{TrainConfig, TrainingLog};
