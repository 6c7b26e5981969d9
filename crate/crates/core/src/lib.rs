//! Dynamic contrastive distillation for cross-modal matching.
//!
//! A large teacher scorer mines hard in-batch negatives for a small student,
//! repairs its own ranking so the positive always scores highest, and weights
//! each query's hard-label and soft-label terms by its own uncertainty.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod mining;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use data::{Dataset, DatasetManifest, Split};
pub use error::{Error, Result};
pub use eval::{RetrievalMetrics, SeparabilityTrace};
pub use losses::{DistillPair, LossValue, WeightVector};
pub use mining::{CandidateList, Direction, MiningConfig};
pub use model::{ScorerConfig, ScorerParams};
pub use tensor::Matrix;
pub use train::{Regime, RunRecord, TrainConfig};
