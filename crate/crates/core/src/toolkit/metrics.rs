//! Belief-quality metrics: per-timestep hand cross-entropy under learned
//! and analytic models, the derived semantic cross-entropy, and the
//! narrowing factor exp(CE).

use super::{Result, ToolkitError};
use crate::belief::{exact_posterior, grounded_belief, BeliefNet, RecurrentBelief};
use crate::coordination::pearson_r;
use crate::env::{semantic_label, Game, HiddenFeatures, MiniHanabi, Trajectory};
use crate::policy::{run_episode, ActMode, Policy, PolicyPool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Cross-entropy statistics at one trajectory timestep, aggregated over
/// evaluation games (nats per occupied slot).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CePoint {
    pub timestep: usize,
    pub mean: f64,
    pub sem: f64,
    pub n_games: usize,
}

fn aggregate(per_step: Vec<Vec<f64>>) -> Vec<CePoint> {
    per_step
        .into_iter()
        .enumerate()
        .filter(|(_, xs)| !xs.is_empty())
        .map(|(t, xs)| {
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let sem = if n > 1 {
                let var =
                    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            CePoint {
                timestep: t,
                mean,
                sem,
                n_games: n,
            }
        })
        .collect()
}

/// A model assigning negative log-likelihood (mean nats per occupied slot)
/// to the agent's true hand given its history prefix.
pub trait BeliefEvaluator: Sync {
    fn name(&self) -> String;
    fn nll(
        &self,
        game: &MiniHanabi,
        traj: &Trajectory,
        truth: &HiddenFeatures,
        partner: &dyn Policy,
    ) -> Result<f64>;
}

pub struct LearnedEvaluator(pub Arc<BeliefNet>);

impl BeliefEvaluator for LearnedEvaluator {
    fn name(&self) -> String {
        "learned".into()
    }

    fn nll(
        &self,
        _game: &MiniHanabi,
        traj: &Trajectory,
        truth: &HiddenFeatures,
        _partner: &dyn Policy,
    ) -> Result<f64> {
        Ok(self.0.nll(traj, truth)?)
    }
}

pub struct RecurrentEvaluator(pub Arc<RecurrentBelief>);

impl BeliefEvaluator for RecurrentEvaluator {
    fn name(&self) -> String {
        "recurrent".into()
    }

    fn nll(
        &self,
        _game: &MiniHanabi,
        traj: &Trajectory,
        truth: &HiddenFeatures,
        _partner: &dyn Policy,
    ) -> Result<f64> {
        Ok(self.0.nll(traj, truth)?)
    }
}

/// Mean nats per occupied slot from a joint distribution. The slot-chain
/// conditionals telescope, so -ln p(joint) / n_occupied equals the masked
/// mean autoregressive cross-entropy the networks report.
fn joint_nll(prob: f64, truth: &HiddenFeatures) -> Result<f64> {
    let occupied = truth.occupied.iter().filter(|&&o| o).count();
    if occupied == 0 {
        return Err(ToolkitError::Contract("no occupied slots".into()));
    }
    if prob <= 0.0 {
        return Err(ToolkitError::Contract(
            "true hand has zero probability".into(),
        ));
    }
    Ok(-prob.ln() / occupied as f64)
}

pub struct GroundedEvaluator;

impl BeliefEvaluator for GroundedEvaluator {
    fn name(&self) -> String {
        "grounded".into()
    }

    fn nll(
        &self,
        game: &MiniHanabi,
        traj: &Trajectory,
        truth: &HiddenFeatures,
        _partner: &dyn Policy,
    ) -> Result<f64> {
        let belief = grounded_belief(game, traj)?;
        joint_nll(belief.prob_of(truth), truth)
    }
}

pub struct ExactEvaluator;

impl BeliefEvaluator for ExactEvaluator {
    fn name(&self) -> String {
        "exact".into()
    }

    fn nll(
        &self,
        game: &MiniHanabi,
        traj: &Trajectory,
        truth: &HiddenFeatures,
        partner: &dyn Policy,
    ) -> Result<f64> {
        let belief = exact_posterior(game, traj, partner)?;
        joint_nll(belief.prob_of(truth), truth)
    }
}

/// Per-timestep hand cross-entropy over self-play games by pool members
/// drawn uniformly per game, both seats scored. Timesteps with an empty
/// hand are skipped.
pub fn eval_ce_curve(
    pool: &PolicyPool,
    evaluator: &dyn BeliefEvaluator,
    games: usize,
    seed: u64,
) -> Result<Vec<CePoint>> {
    if pool.is_empty() || games == 0 {
        return Err(ToolkitError::Contract(
            "need a non-empty pool and games >= 1".into(),
        ));
    }
    let game = pool.game.as_ref();
    let per_game: Vec<Result<Vec<(usize, f64)>>> = (0..games as u64)
        .into_par_iter()
        .map(|g| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ g.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let member = &pool.members[rng.gen_range(0..pool.len())];
            let episode = run_episode(
                game,
                [member.as_ref(), member.as_ref()],
                rng.gen(),
                ActMode::Sample,
            )?;
            let mut out = Vec::new();
            for agent in 0..2 {
                let traj = &episode.trajectories[agent];
                for t in 0..=traj.num_turns() {
                    let truth = game.hidden_features(&episode.states[t], agent);
                    if !truth.occupied.iter().any(|&o| o) {
                        continue;
                    }
                    let nll =
                        evaluator.nll(game, &traj.prefix(t), &truth, member.as_ref())?;
                    out.push((t, nll));
                }
            }
            Ok(out)
        })
        .collect();
    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); game.max_turns() + 1];
    for r in per_game {
        for (t, nll) in r? {
            per_step[t].push(nll);
        }
    }
    Ok(aggregate(per_step))
}

/// Semantic cross-entropy: the model's per-slot identity distribution is
/// collapsed onto {playable, discardable, other} with respect to the true
/// fireworks state, and scored against the true card's class.
pub fn semantic_ce(
    pool: &PolicyPool,
    net: &BeliefNet,
    games: usize,
    seed: u64,
) -> Result<Vec<CePoint>> {
    if pool.is_empty() || games == 0 {
        return Err(ToolkitError::Contract(
            "need a non-empty pool and games >= 1".into(),
        ));
    }
    let game = pool.game.as_ref();
    let per_game: Vec<Result<Vec<(usize, f64)>>> = (0..games as u64)
        .into_par_iter()
        .map(|g| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ g.wrapping_mul(0x94d0_49bb_1331_11eb));
            let member = &pool.members[rng.gen_range(0..pool.len())];
            let episode = run_episode(
                game,
                [member.as_ref(), member.as_ref()],
                rng.gen(),
                ActMode::Sample,
            )?;
            let mut out = Vec::new();
            for agent in 0..2 {
                let traj = &episode.trajectories[agent];
                for t in 0..=traj.num_turns() {
                    let state = &episode.states[t];
                    let truth = game.hidden_features(state, agent);
                    let occupied = truth.occupied.iter().filter(|&&o| o).count();
                    if occupied == 0 {
                        continue;
                    }
                    let slot_probs = net.slot_probs(&traj.prefix(t), &truth)?;
                    let mut total = 0.0;
                    for (s, probs) in slot_probs.iter().enumerate() {
                        if !truth.occupied[s] {
                            continue;
                        }
                        let true_class =
                            semantic_label(&game.config, truth.slots[s], state).index();
                        let mass: f64 = probs
                            .iter()
                            .enumerate()
                            .filter(|&(id, _)| {
                                semantic_label(&game.config, id, state).index() == true_class
                            })
                            .map(|(_, p)| p)
                            .sum();
                        if mass <= 0.0 {
                            return Err(ToolkitError::Contract(
                                "true semantic class has zero mass".into(),
                            ));
                        }
                        total += -mass.ln();
                    }
                    out.push((t, total / occupied as f64));
                }
            }
            Ok(out)
        })
        .collect();
    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); game.max_turns() + 1];
    for r in per_game {
        for (t, nll) in r? {
            per_step[t].push(nll);
        }
    }
    Ok(aggregate(per_step))
}

/// Narrowing factor: the effective number of equally likely identities a
/// cross-entropy of `ce` nats per slot corresponds to. exp(ln C) = C for a
/// maximally uncertain model, exp(0) = 1 for a perfect one.
pub fn narrow_down(ce: f64) -> f64 {
    ce.exp()
}

/// Pearson correlation between belief quality and coordination quality,
/// given per-partner (cross-play score, cross-entropy) pairs.
pub fn ce_xp_correlation(points: &[(f64, f64)]) -> Result<f64> {
    Ok(pearson_r(points)?)
}
