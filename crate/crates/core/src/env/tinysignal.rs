//! TinySignal: a two-turn signalling game small enough to verify belief
//! and search code against hand-computed optima. Player 1 (the guesser)
//! holds one hidden card out of three identities; player 0 (the hinter)
//! sees it and sends one of four signals; the guesser then names an
//! identity and scores 1 on a match.

use super::{
    CardId, EnvError, FeatureSchema, Game, GroundedConstraints, HiddenFeatures,
    ObservationFeatures, Replay, Result, StepOutcome, TrajStep, Trajectory,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TS_IDENTITIES: usize = 3;
pub const TS_SIGNALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TinySignalState {
    pub card: CardId,
    /// Signal sent on turn 0, if any.
    pub signal: Option<usize>,
    pub turn: usize,
    pub terminal: bool,
    pub score: usize,
}

pub struct TinySignal {
    schema: FeatureSchema,
}

impl TinySignal {
    pub fn new() -> Self {
        TinySignal {
            schema: FeatureSchema {
                names: vec!["turn".into(), "signal".into(), "seen_card".into()],
                cardinalities: vec![3, TS_SIGNALS + 1, TS_IDENTITIES + 1],
            },
        }
    }
}

impl Default for TinySignal {
    fn default() -> Self {
        Self::new()
    }
}

impl Game for TinySignal {
    type State = TinySignalState;

    fn num_actions(&self) -> usize {
        TS_SIGNALS.max(TS_IDENTITIES)
    }

    fn feature_schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn hidden_slots(&self) -> usize {
        1
    }

    fn num_identities(&self) -> usize {
        TS_IDENTITIES
    }

    fn max_turns(&self) -> usize {
        2
    }

    fn max_score(&self) -> f64 {
        1.0
    }

    fn new_game(&self, seed: u64) -> TinySignalState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TinySignalState {
            card: rng.gen_range(0..TS_IDENTITIES),
            signal: None,
            turn: 0,
            terminal: false,
            score: 0,
        }
    }

    fn is_terminal(&self, state: &TinySignalState) -> bool {
        state.terminal
    }

    fn current_player(&self, state: &TinySignalState) -> usize {
        state.turn
    }

    fn legal_actions(&self, state: &TinySignalState) -> Result<Vec<usize>> {
        if state.terminal {
            return Err(EnvError::Contract(
                "legal_actions on a terminal state".into(),
            ));
        }
        Ok(if state.turn == 0 {
            (0..TS_SIGNALS).collect()
        } else {
            (0..TS_IDENTITIES).collect()
        })
    }

    fn step(&self, state: &TinySignalState, action: usize) -> Result<StepOutcome<TinySignalState>> {
        let legal = self.legal_actions(state)?;
        if !legal.contains(&action) {
            return Err(EnvError::IllegalAction { action });
        }
        let mut s = state.clone();
        let mut reward = 0.0;
        if s.turn == 0 {
            s.signal = Some(action);
            s.turn = 1;
        } else {
            if action == s.card {
                reward = 1.0;
                s.score = 1;
            }
            s.terminal = true;
            s.turn = 2;
        }
        Ok(StepOutcome {
            terminal: s.terminal,
            reward,
            state: s,
        })
    }

    fn observe(&self, state: &TinySignalState, agent: usize) -> ObservationFeatures {
        // the hinter (player 0) has full observability; the guesser never
        // sees the card
        ObservationFeatures {
            values: vec![
                state.turn.min(2) as u16,
                state.signal.map(|s| s as u16 + 1).unwrap_or(0),
                if agent == 0 { state.card as u16 + 1 } else { 0 },
            ],
        }
    }

    fn hidden_features(&self, state: &TinySignalState, agent: usize) -> HiddenFeatures {
        // the hidden card belongs to the guesser's "hand"
        if agent == 1 {
            HiddenFeatures::full(vec![state.card])
        } else {
            HiddenFeatures {
                slots: vec![0],
                occupied: vec![false],
            }
        }
    }

    fn grounded_constraints(&self, traj: &Trajectory) -> GroundedConstraints {
        let occupied = traj.agent == 1;
        GroundedConstraints {
            remaining_counts: vec![1; TS_IDENTITIES],
            slot_masks: vec![vec![true; TS_IDENTITIES]],
            occupied: vec![occupied],
        }
    }

    fn replay_with_candidate(
        &self,
        traj: &Trajectory,
        candidate: &HiddenFeatures,
        _seed: u64,
    ) -> Result<Replay<TinySignalState>> {
        if traj.agent != 1 {
            return Err(EnvError::Contract(
                "only the guesser has hidden features".into(),
            ));
        }
        if !self.grounded_constraints(traj).admits(candidate) {
            return Err(EnvError::Inconsistent("candidate out of range".into()));
        }
        let mut state = TinySignalState {
            card: candidate.slots[0],
            signal: None,
            turn: 0,
            terminal: false,
            score: 0,
        };
        let mut states = vec![state.clone()];
        let mut trajs: Vec<Trajectory> = (0..2)
            .map(|p| Trajectory::new(p, self.observe(&state, p)))
            .collect();
        for t in 1..traj.steps.len() {
            let step = &traj.steps[t];
            let actor = step
                .actor
                .ok_or_else(|| EnvError::Contract("step without actor".into()))?;
            let action = step
                .action
                .ok_or_else(|| EnvError::Contract("step without action".into()))?;
            if self.current_player(&state) != actor {
                return Err(EnvError::Inconsistent("actor out of turn".into()));
            }
            let outcome = self.step(&state, action)?;
            state = outcome.state;
            for p in 0..2 {
                trajs[p].steps.push(TrajStep {
                    obs: self.observe(&state, p),
                    actor: Some(actor),
                    action: Some(action),
                    own_reveal: None,
                });
                trajs[p].rewards.push(outcome.reward);
                trajs[p].terminal = outcome.terminal;
            }
            states.push(state.clone());
        }
        for (t, step) in traj.steps.iter().enumerate() {
            if trajs[1].steps[t].obs != step.obs {
                return Err(EnvError::Inconsistent(format!(
                    "replayed observation diverges at turn {t}"
                )));
            }
        }
        Ok(Replay {
            states,
            trajectories: trajs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guesser_never_sees_card() {
        let game = TinySignal::new();
        for seed in 0..20 {
            let s = game.new_game(seed);
            let obs = game.observe(&s, 1);
            assert_eq!(obs.values[2], 0);
            let obs0 = game.observe(&s, 0);
            assert_eq!(obs0.values[2] as usize, s.card + 1);
        }
    }

    #[test]
    fn correct_guess_scores_one() {
        let game = TinySignal::new();
        let s = game.new_game(7);
        let card = s.card;
        let s = game.step(&s, 0).unwrap().state;
        let out = game.step(&s, card).unwrap();
        assert!(out.terminal);
        assert_eq!(out.reward, 1.0);
        let wrong = (card + 1) % TS_IDENTITIES;
        let s2 = game.step(&game.new_game(7), 1).unwrap().state;
        assert_eq!(game.step(&s2, wrong).unwrap().reward, 0.0);
    }

    #[test]
    fn replay_injects_candidate_card() {
        let game = TinySignal::new();
        let s0 = game.new_game(3);
        let mut traj = Trajectory::new(1, game.observe(&s0, 1));
        let out = game.step(&s0, 2).unwrap();
        traj.steps.push(TrajStep {
            obs: game.observe(&out.state, 1),
            actor: Some(0),
            action: Some(2),
            own_reveal: None,
        });
        traj.rewards.push(out.reward);
        for cand in 0..TS_IDENTITIES {
            let replay = game
                .replay_with_candidate(&traj, &HiddenFeatures::full(vec![cand]), 0)
                .unwrap();
            assert_eq!(replay.states.last().unwrap().card, cand);
        }
    }
}
