//! Belief-driven coordination: Monte Carlo search over sampled hands
//! (GBS/SBS), best responses trained with and without the belief model's
//! hidden state, and the permutation-test machinery used to compare
//! methods.

pub mod br;
pub mod search;
pub mod stats;

pub use br::{train_best_response, BestResponse, BrConfig};
pub use search::{
    evaluate_crossplay, gbs_act, gbs_values, sbs_act, BeliefSampler, ExactSampler,
    GroundedSampler, NetSampler, ScoreReport, SearchConfig, Seat,
};
pub use stats::{clopper_pearson, pearson_r, permutation_test, Tail, TestReport};

use crate::belief::BeliefError;
use crate::env::EnvError;
use crate::policy::PolicyError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CoordError>;
