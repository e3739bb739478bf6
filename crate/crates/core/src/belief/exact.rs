//! Enumeration-based beliefs: the grounded belief (uniform over
//! rule-consistent hands, with copy-multiplicity weights) and the exact
//! Bayesian posterior (grounded prior times the partner policy's
//! likelihood of every observed partner action under each candidate).

use super::{BeliefError, Result, ENUMERATION_CAP};
use crate::env::{Game, HiddenFeatures, Trajectory};
use crate::policy::Policy;
use std::collections::HashMap;

/// A belief over the agent's hidden slots: explicit joint over candidate
/// hand tuples plus its per-slot marginals. Unoccupied slots carry a
/// uniform placeholder row.
#[derive(Debug, Clone)]
pub struct BeliefDistribution {
    /// H x C marginals; each occupied row sums to 1.
    pub per_slot: Vec<Vec<f64>>,
    pub occupied: Vec<bool>,
    /// Candidate hands with normalized probabilities.
    pub joint: Vec<(HiddenFeatures, f64)>,
}

impl BeliefDistribution {
    fn from_weighted(
        num_identities: usize,
        occupied: Vec<bool>,
        mut joint: Vec<(HiddenFeatures, f64)>,
    ) -> Result<Self> {
        joint.retain(|(_, w)| *w > 0.0);
        let total: f64 = joint.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(BeliefError::Inconsistent(
                "no candidate hand carries positive probability".into(),
            ));
        }
        for (_, w) in joint.iter_mut() {
            *w /= total;
        }
        let h = occupied.len();
        let mut per_slot = vec![vec![0.0; num_identities]; h];
        for (hand, w) in &joint {
            for s in 0..h {
                if occupied[s] {
                    per_slot[s][hand.slots[s]] += w;
                }
            }
        }
        for (s, row) in per_slot.iter_mut().enumerate() {
            if !occupied[s] {
                for v in row.iter_mut() {
                    *v = 1.0 / num_identities as f64;
                }
            }
        }
        Ok(BeliefDistribution {
            per_slot,
            occupied,
            joint,
        })
    }

    pub fn prob_of(&self, hand: &HiddenFeatures) -> f64 {
        self.joint
            .iter()
            .find(|(h, _)| h == hand)
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }

    /// Max absolute difference between two beliefs' joints, over the union
    /// of their supports.
    pub fn joint_max_diff(&self, other: &BeliefDistribution) -> f64 {
        let mut d = 0.0f64;
        for (hand, w) in &self.joint {
            d = d.max((w - other.prob_of(hand)).abs());
        }
        for (hand, w) in &other.joint {
            d = d.max((w - self.prob_of(hand)).abs());
        }
        d
    }
}

fn hand_key(h: &HiddenFeatures) -> (Vec<usize>, Vec<bool>) {
    (h.slots.clone(), h.occupied.clone())
}

/// Eq.-style grounded belief: uniform over all hand tuples consistent with
/// card counting and accumulated hint masks (copy-multiplicity weights, so
/// slot marginals equal remaining-count fractions before any hints).
pub fn grounded_belief<G: Game>(game: &G, traj: &Trajectory) -> Result<BeliefDistribution> {
    let gc = game.grounded_constraints(traj);
    let cands = gc.enumerate();
    if cands.len() > ENUMERATION_CAP {
        return Err(BeliefError::Capacity {
            candidates: cands.len(),
            cap: ENUMERATION_CAP,
        });
    }
    BeliefDistribution::from_weighted(game.num_identities(), gc.occupied.clone(), cands)
}

/// Log-likelihood of every partner action in `traj` under `partner`, with
/// the candidate hand substituted for the agent's. Returns None when the
/// partner policy gives some observed action probability zero.
fn partner_log_likelihood<G: Game>(
    game: &G,
    traj: &Trajectory,
    candidate: &HiddenFeatures,
    partner: &dyn Policy,
) -> Result<Option<f64>> {
    let replay = match game.replay_with_candidate(traj, candidate, 0) {
        Ok(r) => r,
        Err(crate::env::EnvError::Inconsistent(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let pj = 1 - traj.agent;
    let ptraj = &replay.trajectories[pj];
    let mut ctx = partner.begin_episode();
    partner.observe(&mut ctx, &ptraj.steps[0].obs)?;
    let mut ll = 0.0;
    for t in 1..ptraj.steps.len() {
        let step = &ptraj.steps[t];
        if step.actor == Some(pj) {
            let legal = game.legal_actions(&replay.states[t - 1])?;
            let probs = partner.action_probs(&ctx, &legal)?;
            let p = probs[step.action.unwrap()];
            if p <= 0.0 {
                return Ok(None);
            }
            ll += p.ln();
        }
        partner.observe(&mut ctx, &step.obs)?;
    }
    Ok(Some(ll))
}

/// The exact Bayesian posterior over the agent's current hand:
/// P(hand) proportional to grounded-prior(hand) times the product over
/// partner turns of pi^j(a_t | tau_t^j(hand)). Log-space accumulation;
/// the agent's own action terms cancel because its policy conditions on
/// the AOH only.
pub fn exact_posterior<G: Game>(
    game: &G,
    traj: &Trajectory,
    partner: &dyn Policy,
) -> Result<BeliefDistribution> {
    let gc = game.grounded_constraints(traj);
    let cands = gc.enumerate();
    if cands.len() > ENUMERATION_CAP {
        return Err(BeliefError::Capacity {
            candidates: cands.len(),
            cap: ENUMERATION_CAP,
        });
    }
    let mut logs: Vec<Option<(HiddenFeatures, f64, f64)>> = Vec::with_capacity(cands.len());
    let mut max_ll = f64::NEG_INFINITY;
    for (hand, prior) in cands {
        match partner_log_likelihood(game, traj, &hand, partner)? {
            Some(ll) => {
                max_ll = max_ll.max(ll);
                logs.push(Some((hand, prior, ll)));
            }
            None => logs.push(None),
        }
    }
    if max_ll == f64::NEG_INFINITY {
        return Err(BeliefError::Inconsistent(
            "partner policy cannot have produced the observed actions".into(),
        ));
    }
    let joint: Vec<(HiddenFeatures, f64)> = logs
        .into_iter()
        .flatten()
        .map(|(hand, prior, ll)| (hand, prior * (ll - max_ll).exp()))
        .collect();
    BeliefDistribution::from_weighted(game.num_identities(), gc.occupied.clone(), joint)
}

/// One step of the iterative Bayes update: candidates at the new timestep
/// inherit mass from their unique predecessor hand, rescaled by the change
/// in copy-multiplicity prior (which absorbs revealed-card evidence) and,
/// when the partner acted, by its action likelihood. Renormalizes.
///
/// `prev` must be the belief for `traj.prefix(turns - 1)` where `turns`
/// is `traj.num_turns()`.
pub fn iterative_update<G: Game>(
    game: &G,
    prev: &BeliefDistribution,
    traj: &Trajectory,
    partner: &dyn Policy,
) -> Result<BeliefDistribution> {
    let turns = traj.num_turns();
    if turns == 0 {
        return Err(BeliefError::Contract(
            "iterative_update needs at least one turn".into(),
        ));
    }
    let prev_traj = traj.prefix(turns - 1);
    let gc_prev = game.grounded_constraints(&prev_traj);
    let gc_next = game.grounded_constraints(traj);
    let prior_prev: HashMap<_, f64> = gc_prev
        .enumerate()
        .into_iter()
        .map(|(h, w)| (hand_key(&h), w))
        .collect();
    let mass_prev: HashMap<_, f64> = prev
        .joint
        .iter()
        .map(|(h, w)| (hand_key(h), *w))
        .collect();

    let step = traj.steps.last().unwrap();
    let actor = step
        .actor
        .ok_or_else(|| BeliefError::Contract("turn without actor".into()))?;
    let agent_acted = actor == traj.agent;
    // when the agent played or discarded, reconstruct the predecessor hand
    // from the revealed identity and the slot geometry
    // plays and discards encode the slot as action id modulo hand size
    let own_removal: Option<(usize, usize)> = if agent_acted {
        step.own_reveal.map(|id| (step.action.unwrap(), id))
    } else {
        None
    };
    let prev_size = gc_prev.occupied.iter().filter(|&&o| o).count();
    let next_size = gc_next.occupied.iter().filter(|&&o| o).count();

    let cands = gc_next.enumerate();
    if cands.len() > ENUMERATION_CAP {
        return Err(BeliefError::Capacity {
            candidates: cands.len(),
            cap: ENUMERATION_CAP,
        });
    }
    let mut joint = Vec::with_capacity(cands.len());
    for (hand, prior_next) in cands {
        let parent = match own_removal {
            Some((slot, reveal)) => {
                predecessor_hand(&hand, slot, reveal, prev_size, next_size, gc_prev.occupied.len())
            }
            None => hand.clone(),
        };
        let key = hand_key(&parent);
        let (Some(&m), Some(&p0)) = (mass_prev.get(&key), prior_prev.get(&key)) else {
            continue;
        };
        if m <= 0.0 || p0 <= 0.0 {
            continue;
        }
        let mut w = m * prior_next / p0;
        if !agent_acted {
            // only the newest action's likelihood belongs to this step;
            // earlier factors already live inside the prior mass `m`
            let p = last_action_prob(game, traj, &hand, partner)?;
            if p <= 0.0 {
                continue;
            }
            w *= p;
        }
        if w > 0.0 {
            joint.push((hand, w));
        }
    }
    BeliefDistribution::from_weighted(game.num_identities(), gc_next.occupied.clone(), joint)
}

/// Probability the partner assigns to the final action of `traj` given the
/// candidate hand (1.0 when the final actor is the agent itself).
fn last_action_prob<G: Game>(
    game: &G,
    traj: &Trajectory,
    candidate: &HiddenFeatures,
    partner: &dyn Policy,
) -> Result<f64> {
    let replay = match game.replay_with_candidate(traj, candidate, 0) {
        Ok(r) => r,
        Err(crate::env::EnvError::Inconsistent(_)) => return Ok(0.0),
        Err(e) => return Err(e.into()),
    };
    let pj = 1 - traj.agent;
    let last = traj.steps.len() - 1;
    if traj.steps[last].actor != Some(pj) {
        return Ok(1.0);
    }
    let ptraj = &replay.trajectories[pj];
    let mut ctx = partner.begin_episode();
    partner.observe(&mut ctx, &ptraj.steps[0].obs)?;
    for t in 1..last {
        partner.observe(&mut ctx, &ptraj.steps[t].obs)?;
    }
    let legal = game.legal_actions(&replay.states[last - 1])?;
    let probs = partner.action_probs(&ctx, &legal)?;
    Ok(probs[traj.steps[last].action.unwrap()])
}

/// Inverse of the remove-slot-then-draw-at-back hand transformation.
fn predecessor_hand(
    hand: &HiddenFeatures,
    removal_action: usize,
    reveal: usize,
    prev_size: usize,
    next_size: usize,
    max_slots: usize,
) -> HiddenFeatures {
    let live: Vec<usize> = hand
        .slots
        .iter()
        .zip(hand.occupied.iter())
        .filter(|(_, &o)| o)
        .map(|(&s, _)| s)
        .collect();
    debug_assert_eq!(live.len(), next_size);
    let slot = removal_action % max_slots.max(1);
    let mut parent: Vec<usize> = if next_size == prev_size {
        // a draw refilled the hand: drop the newest card before inserting
        live[..live.len().saturating_sub(1)].to_vec()
    } else {
        live
    };
    let at = slot.min(parent.len());
    parent.insert(at, reveal);
    let mut slots = vec![0usize; max_slots];
    let mut occupied = vec![false; max_slots];
    for (i, &id) in parent.iter().enumerate() {
        slots[i] = id;
        occupied[i] = true;
    }
    HiddenFeatures { slots, occupied }
}
