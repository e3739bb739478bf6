//! Generalized belief search: Monte Carlo rollouts for every legal move,
//! each predicated on a hand sampled from a belief source and played out
//! against a pool-uniform partner, with a blueprint-favoring deviation
//! rule.

use super::{CoordError, Result};
use crate::belief::{exact_posterior, grounded_belief, BeliefNet};
use crate::env::{Game, HiddenFeatures, MiniHanabi, Trajectory};
use crate::policy::{act, ActMode, Policy, PolicyCtx};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    pub samples_per_decision: usize,
    pub rollouts_per_move: usize,
    /// Minimum estimated improvement over the blueprint action required to
    /// deviate from it.
    pub deviation_margin: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            samples_per_decision: 20,
            rollouts_per_move: 200,
            deviation_margin: 0.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if self.samples_per_decision < 1 || self.rollouts_per_move < 1 {
            return Err(CoordError::Contract(
                "search needs at least one sample and one rollout".into(),
            ));
        }
        if !(self.deviation_margin >= 0.0) {
            return Err(CoordError::Contract(
                "deviation margin must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// A source of hands consistent with the agent's AOH: the learned belief,
/// the exact posterior, or the grounded belief.
pub trait BeliefSampler<G: Game>: Send + Sync {
    fn sample_hand(&self, game: &G, traj: &Trajectory, seed: u64) -> Result<HiddenFeatures>;
}

fn weighted_draw(joint: &[(HiddenFeatures, f64)], seed: u64) -> HiddenFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d));
    let mut u = rng.gen::<f64>();
    for (hand, w) in joint {
        u -= w;
        if u <= 0.0 {
            return hand.clone();
        }
    }
    joint.last().expect("nonempty joint").0.clone()
}

/// Samples from the exact Bayesian posterior under a known partner policy.
pub struct ExactSampler {
    pub partner: Arc<dyn Policy>,
}

impl<G: Game> BeliefSampler<G> for ExactSampler {
    fn sample_hand(&self, game: &G, traj: &Trajectory, seed: u64) -> Result<HiddenFeatures> {
        let posterior = exact_posterior(game, traj, self.partner.as_ref())?;
        Ok(weighted_draw(&posterior.joint, seed))
    }
}

/// Samples from the grounded belief (no action evidence).
pub struct GroundedSampler;

impl<G: Game> BeliefSampler<G> for GroundedSampler {
    fn sample_hand(&self, game: &G, traj: &Trajectory, seed: u64) -> Result<HiddenFeatures> {
        let belief = grounded_belief(game, traj)?;
        Ok(weighted_draw(&belief.joint, seed))
    }
}

/// Samples from a learned belief model with grounded-rejection fallback.
pub struct NetSampler {
    pub net: Arc<BeliefNet>,
}

impl<G: Game> BeliefSampler<G> for NetSampler {
    fn sample_hand(&self, game: &G, traj: &Trajectory, seed: u64) -> Result<HiddenFeatures> {
        let gc = game.grounded_constraints(traj);
        Ok(self.net.sample_hand(traj, seed, Some(&gc), 64)?)
    }
}

fn warm_ctx(policy: &dyn Policy, traj: &Trajectory) -> Result<PolicyCtx> {
    let mut ctx = policy.begin_episode();
    for step in &traj.steps {
        policy.observe(&mut ctx, &step.obs)?;
    }
    Ok(ctx)
}

/// Plays out from `state` after forcing `forced` for the searching agent:
/// warms both contexts on the replayed histories, then plays greedily to
/// terminal. Returns the undiscounted return-to-go (the score already on
/// the table is a constant offset shared by all moves).
#[allow(clippy::too_many_arguments)]
fn rollout_from<G: Game>(
    game: &G,
    state: &G::State,
    agent: usize,
    blueprint: &dyn Policy,
    partner: &dyn Policy,
    agent_traj: &Trajectory,
    partner_traj: &Trajectory,
    forced: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c62272e07bb0142);
    let mut ctxs = [warm_ctx(blueprint, agent_traj)?, warm_ctx(partner, partner_traj)?];
    let seat_policy = |seat: usize| -> &dyn Policy {
        if seat == agent {
            blueprint
        } else {
            partner
        }
    };
    let ctx_index = |seat: usize| usize::from(seat != agent);

    let out = game.step(state, forced)?;
    let mut ret = out.reward;
    let mut state = out.state;
    for seat in 0..2 {
        seat_policy(seat).observe(&mut ctxs[ctx_index(seat)], &game.observe(&state, seat))?;
    }
    while !game.is_terminal(&state) {
        let actor = game.current_player(&state);
        let legal = game.legal_actions(&state)?;
        let action = act(
            seat_policy(actor),
            &ctxs[ctx_index(actor)],
            &legal,
            ActMode::Greedy,
            &mut rng,
        )?;
        let out = game.step(&state, action)?;
        ret += out.reward;
        state = out.state;
        for seat in 0..2 {
            seat_policy(seat).observe(&mut ctxs[ctx_index(seat)], &game.observe(&state, seat))?;
        }
    }
    Ok(ret)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0xff51afd7ed558ccd))
        .wrapping_add(b.wrapping_mul(0xc4ceb9fe1a85ec53))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Monte Carlo action-value estimates for every legal move: rollouts are
/// predicated on hands sampled from `belief` and partnered with
/// pool-uniform policies, with draws shared across moves (common random
/// numbers, so comparisons are paired).
pub fn gbs_values<G: Game>(
    game: &G,
    blueprint: &dyn Policy,
    belief: &dyn BeliefSampler<G>,
    pool: &[Arc<dyn Policy>],
    traj: &Trajectory,
    legal: &[usize],
    cfg: &SearchConfig,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if legal.is_empty() {
        return Err(CoordError::Contract("empty legal action set".into()));
    }
    if pool.is_empty() {
        return Err(CoordError::Contract("empty rollout partner pool".into()));
    }
    let agent = traj.agent;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x243f6a8885a308d3);
    let samples: Vec<HiddenFeatures> = (0..cfg.samples_per_decision)
        .map(|i| belief.sample_hand(game, traj, mix(cfg.seed, 1, i as u64)))
        .collect::<Result<_>>()?;
    let draws: Vec<(usize, usize, u64)> = (0..cfg.rollouts_per_move)
        .map(|r| {
            (
                r % samples.len(),
                rng.gen_range(0..pool.len()),
                mix(cfg.seed, 2, r as u64),
            )
        })
        .collect();
    legal
        .iter()
        .map(|&m| {
            let total: f64 = draws
                .par_iter()
                .map(|&(si, pi, rseed)| {
                    let replay = game.replay_with_candidate(traj, &samples[si], rseed)?;
                    let state = replay
                        .states
                        .last()
                        .ok_or_else(|| CoordError::Contract("empty replay".into()))?;
                    rollout_from(
                        game,
                        state,
                        agent,
                        blueprint,
                        pool[pi].as_ref(),
                        &replay.trajectories[agent],
                        &replay.trajectories[1 - agent],
                        m,
                        rseed,
                    )
                })
                .sum::<Result<f64>>()?;
            Ok((m, total / cfg.rollouts_per_move as f64))
        })
        .collect()
}

/// One belief-search decision. Evaluates every legal move via
/// [`gbs_values`] and deviates from the blueprint action only when the
/// estimated gain exceeds `deviation_margin` (ties favor the blueprint,
/// then the lowest action id).
pub fn gbs_act<G: Game>(
    game: &G,
    blueprint: &dyn Policy,
    belief: &dyn BeliefSampler<G>,
    pool: &[Arc<dyn Policy>],
    traj: &Trajectory,
    legal: &[usize],
    cfg: &SearchConfig,
) -> Result<usize> {
    cfg.validate()?;
    if legal.len() == 1 {
        // degenerate decision: no sampling, no rollouts
        return Ok(legal[0]);
    }
    let bp_ctx = warm_ctx(blueprint, traj)?;
    let bp_action = {
        let probs = blueprint.action_probs(&bp_ctx, legal)?;
        let mut best = legal.first().copied().unwrap_or_default();
        let mut best_p = f64::NEG_INFINITY;
        for &a in legal {
            if probs[a] > best_p {
                best_p = probs[a];
                best = a;
            }
        }
        best
    };
    let values = gbs_values(game, blueprint, belief, pool, traj, legal, cfg)?;
    let mut best_action = bp_action;
    let mut best_value = f64::NEG_INFINITY;
    let mut bp_value = f64::NEG_INFINITY;
    for &(m, value) in &values {
        if m == bp_action {
            bp_value = value;
        }
        if value > best_value {
            best_value = value;
            best_action = m;
        }
    }
    if best_action != bp_action && best_value > bp_value + cfg.deviation_margin {
        Ok(best_action)
    } else {
        Ok(bp_action)
    }
}

/// Single-belief search: identical mechanics to [`gbs_act`]; named so that
/// experiment configurations mirror the W/o / SBS / GBS comparison columns.
pub fn sbs_act<G: Game>(
    game: &G,
    blueprint: &dyn Policy,
    belief: &dyn BeliefSampler<G>,
    pool: &[Arc<dyn Policy>],
    traj: &Trajectory,
    legal: &[usize],
    cfg: &SearchConfig,
) -> Result<usize> {
    gbs_act(game, blueprint, belief, pool, traj, legal, cfg)
}

/// One side of a cross-play evaluation: a plain policy or a search-wrapped
/// blueprint.
pub enum Seat {
    Policy(Arc<dyn Policy>),
    Search {
        blueprint: Arc<dyn Policy>,
        belief: Arc<dyn BeliefSampler<MiniHanabi>>,
        pool: Vec<Arc<dyn Policy>>,
        config: SearchConfig,
    },
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub mean: f64,
    pub sem: f64,
    pub scores: Vec<f64>,
}

impl ScoreReport {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = if scores.len() > 1 {
            scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        ScoreReport {
            mean,
            sem: (var / n).sqrt(),
            scores,
        }
    }
}

fn seat_policy_ref(seat: &Seat) -> &dyn Policy {
    match seat {
        Seat::Policy(p) => p.as_ref(),
        Seat::Search { blueprint, .. } => blueprint.as_ref(),
    }
}

/// Plays one seeded game between two seats, tracking each seat's AOH so
/// search seats can query beliefs.
fn play_seated_game(
    game: &MiniHanabi,
    seats: [&Seat; 2],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x452821e638d01377);
    let mut state = game.new_game(seed);
    let mut trajs: Vec<Trajectory> = (0..2)
        .map(|p| Trajectory::new(p, game.observe(&state, p)))
        .collect();
    let mut ctxs: Vec<PolicyCtx> = (0..2)
        .map(|p| {
            let policy = seat_policy_ref(seats[p]);
            let mut ctx = policy.begin_episode();
            policy.observe(&mut ctx, &trajs[p].steps[0].obs)?;
            Ok(ctx)
        })
        .collect::<Result<_>>()?;
    let mut turn = 0u64;
    while !game.is_terminal(&state) {
        let actor = game.current_player(&state);
        let legal = game.legal_actions(&state)?;
        let action = match seats[actor] {
            Seat::Policy(p) => act(p.as_ref(), &ctxs[actor], &legal, ActMode::Greedy, &mut rng)?,
            Seat::Search {
                blueprint,
                belief,
                pool,
                config,
            } => {
                let cfg = SearchConfig {
                    seed: mix(config.seed, seed, turn),
                    ..config.clone()
                };
                gbs_act(
                    game,
                    blueprint.as_ref(),
                    belief.as_ref(),
                    pool,
                    &trajs[actor],
                    &legal,
                    &cfg,
                )?
            }
        };
        let pre_hand = state.hands[actor].clone();
        let out = game.step(&state, action)?;
        let reveal = if action < 2 * game.config.hand_size {
            Some(pre_hand[action % game.config.hand_size])
        } else {
            None
        };
        for p in 0..2 {
            let obs = game.observe(&out.state, p);
            seat_policy_ref(seats[p]).observe(&mut ctxs[p], &obs)?;
            trajs[p].steps.push(crate::env::TrajStep {
                obs,
                actor: Some(actor),
                action: Some(action),
                own_reveal: if p == actor { reveal } else { None },
            });
            trajs[p].rewards.push(out.reward);
            trajs[p].terminal = out.terminal;
        }
        state = out.state;
        turn += 1;
    }
    Ok(state.score as f64)
}

/// Seeded paired games, `a` as player 0 and `b` as player 1; emits the raw
/// score list for downstream statistical tests.
pub fn evaluate_crossplay(
    game: &Arc<MiniHanabi>,
    a: &Seat,
    b: &Seat,
    games: usize,
    seed: u64,
) -> Result<ScoreReport> {
    if games < 1 {
        return Err(CoordError::Contract("games must be >= 1".into()));
    }
    let scores: Vec<f64> = (0..games)
        .into_par_iter()
        .map(|g| play_seated_game(game, [a, b], mix(seed, 3, g as u64)))
        .collect::<Result<_>>()?;
    Ok(ScoreReport::from_scores(scores))
}
