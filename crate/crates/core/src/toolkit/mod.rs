//! Evaluation and introspection toolkit: per-timestep cross-entropy curves
//! for learned and analytic beliefs, semantic (playable/discardable/other)
//! cross-entropy, attention and embedding exports, and deterministic CSV /
//! manifest reporting.

pub mod introspect;
pub mod metrics;
pub mod report;

pub use introspect::{attention_maps, embedding_pca, PcaPoint, PcaReport};
pub use metrics::{
    ce_xp_correlation, eval_ce_curve, narrow_down, semantic_ce, BeliefEvaluator, CePoint,
    ExactEvaluator, GroundedEvaluator, LearnedEvaluator, RecurrentEvaluator,
};
pub use report::{
    score_histogram, write_attention_csv, write_ce_curve_csv, write_manifest, write_pca_csv,
    write_xp_csv, Manifest, ManifestEntry, XpRow,
};

use crate::belief::BeliefError;
use crate::coordination::CoordError;
use crate::env::EnvError;
use crate::policy::PolicyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolkitError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ToolkitError>;
