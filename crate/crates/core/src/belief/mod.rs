//! Beliefs over the agent's own hidden hand.
//!
//! Ground truth comes from enumeration (`exact`): the grounded belief
//! (uniform over rule-consistent hands) and the full Bayesian posterior
//! that additionally weighs each candidate by the partner policy's
//! likelihood of the observed actions. The learned belief (`net`) is an
//! encoder-decoder attention model trained on replayed games.
//!
//! Beliefs range over current-hand tuples only: every card that leaves a
//! hand has its identity revealed, so the current hand is the entire
//! hidden state relevant to the trajectory posterior.

pub mod exact;
pub mod net;
pub mod replay;
pub mod train;

pub use exact::{exact_posterior, grounded_belief, iterative_update, BeliefDistribution};
pub use net::{
    AttnKind, AttnRecord, BeliefNet, EmbedderConfig, ForwardArtifacts, NetMode, RecurrentBelief,
};
pub use replay::{ReplayBuffer, ReplayRecord};
pub use train::{
    generate_replay_data, train_belief, train_recurrent_baseline, LossPoint, TrainConfig,
    TrainMode,
};

use crate::env::EnvError;
use crate::policy::PolicyError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("enumeration cap exceeded: {candidates} candidates > cap {cap}")]
    Capacity { candidates: usize, cap: usize },
    #[error("inconsistent evidence: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, BeliefError>;

/// Default candidate-enumeration cap for exact beliefs.
pub const ENUMERATION_CAP: usize = 1_000_000;
