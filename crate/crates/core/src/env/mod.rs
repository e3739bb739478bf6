//! Turn-based two-player Dec-POMDP environments: configurable Mini-Hanabi
//! and the TinySignal diagnostic game. Exposes factored categorical
//! observations, hidden-feature extraction (own-hand identities), grounded
//! constraints, and candidate-hand replay/injection for search rollouts.

mod hanabi;
mod log;
mod tinysignal;

pub use hanabi::{
    num_actions, semantic_label, GameConfig, HanabiAction, HanabiState, MiniHanabi, ObsView,
    SemanticClass,
};
pub use log::{read_trajectory_log, write_trajectory_log, TrajectoryLogRecord};
pub use tinysignal::{TinySignal, TinySignalState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("illegal action {action} in current state")]
    IllegalAction { action: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("candidate inconsistent with trajectory: {0}")]
    Inconsistent(String),
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Card identity: color * max_rank + (rank - 1).
pub type CardId = usize;

/// Fixed-length vector of categorical feature values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationFeatures {
    pub values: Vec<u16>,
}

/// Declared per-feature cardinalities; shared by both agents of a game.
#[derive(Debug, Clone)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub cardinalities: Vec<usize>,
}

impl FeatureSchema {
    pub fn num_features(&self) -> usize {
        self.cardinalities.len()
    }

    /// Sum of cardinalities: the feature-value vocabulary size.
    pub fn vocab_size(&self) -> usize {
        self.cardinalities.iter().sum()
    }

    /// Offset of feature k's value range within the flat vocabulary.
    pub fn offset(&self, k: usize) -> usize {
        self.cardinalities[..k].iter().sum()
    }

    pub fn validate(&self, obs: &ObservationFeatures) -> Result<()> {
        if obs.values.len() != self.cardinalities.len() {
            return Err(EnvError::Contract(format!(
                "feature count {} != schema {}",
                obs.values.len(),
                self.cardinalities.len()
            )));
        }
        for (k, (&v, &d)) in obs
            .values
            .iter()
            .zip(self.cardinalities.iter())
            .enumerate()
        {
            if (v as usize) >= d {
                return Err(EnvError::Contract(format!(
                    "feature {} ({}) value {} >= cardinality {}",
                    k, self.names[k], v, d
                )));
            }
        }
        Ok(())
    }
}

/// The belief target: the agent's own current hand identities, with an
/// occupancy mask for short end-game hands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenFeatures {
    pub slots: Vec<CardId>,
    pub occupied: Vec<bool>,
}

impl HiddenFeatures {
    pub fn full(slots: Vec<CardId>) -> Self {
        let occupied = vec![true; slots.len()];
        HiddenFeatures { slots, occupied }
    }
}

/// One turn in an agent's action-observation history. `steps[0]` holds the
/// initial observation with no action.
#[derive(Debug, Clone)]
pub struct TrajStep {
    pub obs: ObservationFeatures,
    /// Acting player and global action id for this turn (None for step 0).
    pub actor: Option<usize>,
    pub action: Option<usize>,
    /// Identity revealed to the trajectory's agent by its own play/discard.
    pub own_reveal: Option<CardId>,
}

/// Action-observation history of one agent.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub agent: usize,
    pub steps: Vec<TrajStep>,
    pub terminal: bool,
    /// Reward after each turn; rewards[t] follows steps[t + 1].
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(agent: usize, initial_obs: ObservationFeatures) -> Self {
        Trajectory {
            agent,
            steps: vec![TrajStep {
                obs: initial_obs,
                actor: None,
                action: None,
                own_reveal: None,
            }],
            terminal: false,
            rewards: Vec::new(),
        }
    }

    /// Number of recorded turns (excludes the initial observation).
    pub fn num_turns(&self) -> usize {
        self.steps.len() - 1
    }

    /// History truncated to the first `turns` turns.
    pub fn prefix(&self, turns: usize) -> Trajectory {
        assert!(turns <= self.num_turns());
        Trajectory {
            agent: self.agent,
            steps: self.steps[..=turns].to_vec(),
            terminal: false,
            rewards: self.rewards[..turns].to_vec(),
        }
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Rule-deducible constraints on the agent's hidden slots: the unseen card
/// multiset and per-slot identity masks accumulated from hints.
#[derive(Debug, Clone)]
pub struct GroundedConstraints {
    /// Per identity, copies not visible to the agent (own hand + deck).
    pub remaining_counts: Vec<usize>,
    /// Per slot, allowed identities.
    pub slot_masks: Vec<Vec<bool>>,
    pub occupied: Vec<bool>,
}

impl GroundedConstraints {
    pub fn admits(&self, hand: &HiddenFeatures) -> bool {
        let mut counts = self.remaining_counts.clone();
        for (s, (&id, &occ)) in hand.slots.iter().zip(hand.occupied.iter()).enumerate() {
            if occ != self.occupied[s] {
                return false;
            }
            if !occ {
                continue;
            }
            if !self.slot_masks[s][id] || counts[id] == 0 {
                return false;
            }
            counts[id] -= 1;
        }
        true
    }

    /// All consistent hand tuples with their copy-multiplicity prior
    /// weights (falling-factorial products over the remaining counts).
    pub fn enumerate(&self) -> Vec<(HiddenFeatures, f64)> {
        let num_ids = self.remaining_counts.len();
        let mut out = Vec::new();
        let mut slots = vec![0usize; self.occupied.len()];
        let mut counts = self.remaining_counts.clone();
        fn rec(
            s: usize,
            num_ids: usize,
            occupied: &[bool],
            masks: &[Vec<bool>],
            counts: &mut [usize],
            slots: &mut [usize],
            weight: f64,
            out: &mut Vec<(HiddenFeatures, f64)>,
        ) {
            if s == occupied.len() {
                out.push((
                    HiddenFeatures {
                        slots: slots.to_vec(),
                        occupied: occupied.to_vec(),
                    },
                    weight,
                ));
                return;
            }
            if !occupied[s] {
                slots[s] = 0;
                rec(s + 1, num_ids, occupied, masks, counts, slots, weight, out);
                return;
            }
            for id in 0..num_ids {
                if !masks[s][id] || counts[id] == 0 {
                    continue;
                }
                let w = weight * counts[id] as f64;
                counts[id] -= 1;
                slots[s] = id;
                rec(s + 1, num_ids, occupied, masks, counts, slots, w, out);
                counts[id] += 1;
            }
        }
        rec(
            0,
            num_ids,
            &self.occupied,
            &self.slot_masks,
            &mut counts,
            &mut slots,
            1.0,
            &mut out,
        );
        out
    }
}

/// Result of applying one action.
#[derive(Debug, Clone)]
pub struct StepOutcome<S> {
    pub state: S,
    pub reward: f64,
    pub terminal: bool,
}

/// Full-information replay of a trajectory under a candidate own hand:
/// the state sequence plus both agents' reconstructed histories.
#[derive(Debug, Clone)]
pub struct Replay<S> {
    pub states: Vec<S>,
    pub trajectories: Vec<Trajectory>,
}

/// A two-player turn-based Dec-POMDP with factored observations and
/// enumerable hidden features.
pub trait Game: Sync {
    type State: Clone + Send;

    fn num_actions(&self) -> usize;
    fn feature_schema(&self) -> &FeatureSchema;
    /// H: number of hidden slots per agent.
    fn hidden_slots(&self) -> usize;
    /// C: identity vocabulary size for each hidden slot.
    fn num_identities(&self) -> usize;
    /// Horizon in turns; trajectories have at most this many actions.
    fn max_turns(&self) -> usize;
    fn max_score(&self) -> f64;

    fn new_game(&self, seed: u64) -> Self::State;
    fn is_terminal(&self, state: &Self::State) -> bool;
    fn current_player(&self, state: &Self::State) -> usize;
    fn legal_actions(&self, state: &Self::State) -> Result<Vec<usize>>;
    fn step(&self, state: &Self::State, action: usize) -> Result<StepOutcome<Self::State>>;
    fn observe(&self, state: &Self::State, agent: usize) -> ObservationFeatures;
    fn hidden_features(&self, state: &Self::State, agent: usize) -> HiddenFeatures;

    /// Rule-deducible constraints on the trajectory agent's current hand.
    fn grounded_constraints(&self, traj: &Trajectory) -> GroundedConstraints;

    /// Replays the full game under `candidate` as the agent's current hand.
    /// Fails if the candidate cannot have produced the observed history.
    fn replay_with_candidate(
        &self,
        traj: &Trajectory,
        candidate: &HiddenFeatures,
        seed: u64,
    ) -> Result<Replay<Self::State>>;

    /// A full state consistent with the trajectory whose agent hand equals
    /// `candidate`; the unseen deck is a seeded shuffle.
    fn inject_state(
        &self,
        traj: &Trajectory,
        candidate: &HiddenFeatures,
        seed: u64,
    ) -> Result<Self::State> {
        let replay = self.replay_with_candidate(traj, candidate, seed)?;
        Ok(replay.states.last().expect("replay has states").clone())
    }
}
