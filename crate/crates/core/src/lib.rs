//! Generalized belief learning for small cooperative card games: exact and
//! grounded Bayesian beliefs, a learned autoregressive belief model over
//! pools of convention-divergent policies, belief-driven Monte Carlo search
//! and best-response training, plus evaluation and introspection tooling.

pub mod belief;
pub mod coordination;
pub mod env;
pub mod policy;
pub mod tensor;
pub mod toolkit;

#[doc(hidden)]
pub mod testutil;
