//! Two-stage training: supervised instruction tuning, then reward-guided
//! policy optimization.

pub mod adam;
pub mod rl;
pub mod sft;

use thiserror::Error;

pub use adam::Adam;
pub use rl::{
    compute_returns_and_advantages, ppo_objective, run_rl, Candidate, RlConfig,
    RlIterationMetrics, RolloutGroup,
};
pub use sft::{run_sft, sft_loss, SftConfig, SftEpochMetrics};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("judge error: {0}")]
    Judge(String),
}

impl From<crate::model::ModelError> for TrainError {
    fn from(e: crate::model::ModelError) -> Self {
        TrainError::Model(e.to_string())
    }
}

impl From<crate::model::SamplingError> for TrainError {
    fn from(e: crate::model::SamplingError) -> Self {
        TrainError::Model(e.to_string())
    }
}
