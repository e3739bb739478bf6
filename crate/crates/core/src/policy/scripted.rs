//! Deterministic scripted conventions. Each seed fixes a signal map
//! assigning one hint action per hand slot, meaning "play that slot".
//! Different seeds produce incompatible conventions: a listener trusts its
//! own map and will misplay under a partner using another one.

use super::{Policy, PolicyCtx, PolicyError, Result};
use crate::env::{Game, HanabiAction, MiniHanabi, ObservationFeatures};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub struct ScriptedConvention {
    game: Arc<MiniHanabi>,
    seed: u64,
    /// signals[s]: the hint action id meaning "play slot s".
    signals: Vec<usize>,
}

struct Ctx {
    last_obs: Option<ObservationFeatures>,
}

impl ScriptedConvention {
    pub fn new(game: Arc<MiniHanabi>, seed: u64) -> Self {
        let cfg = &game.config;
        let first_hint = 2 * cfg.hand_size;
        let num_hints = cfg.num_colors + cfg.max_rank;
        let mut hints: Vec<usize> = (first_hint..first_hint + num_hints).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d));
        hints.shuffle(&mut rng);
        let signals = hints[..cfg.hand_size.min(num_hints)].to_vec();
        ScriptedConvention {
            game,
            seed,
            signals,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn signals(&self) -> &[usize] {
        &self.signals
    }

    fn decide(&self, obs: &ObservationFeatures, legal: &[usize]) -> usize {
        let game = self.game.as_ref();
        let cfg = &game.config;
        let v = game.view(obs);

        // 1. obey a fresh play signal from the partner
        if let Some(last) = v.last_action() {
            if let Some(slot) = self.signals.iter().position(|&h| h == last) {
                let play = HanabiAction::Play(slot).to_id(cfg);
                if slot < v.own_hand_size() && legal.contains(&play) {
                    return play;
                }
            }
        }

        // 2. signal the partner's lowest playable slot
        let playable = |id: usize| cfg.rank_of(id) == v.firework(cfg.color_of(id)) + 1;
        for slot in 0..cfg.hand_size {
            if let Some(card) = v.partner_card(slot) {
                if playable(card) && slot < self.signals.len() && legal.contains(&self.signals[slot])
                {
                    return self.signals[slot];
                }
            }
        }

        // 3. recover an info token
        let discard = HanabiAction::Discard(0).to_id(cfg);
        if legal.contains(&discard) {
            return discard;
        }

        // 4. stall with a hint the listener ignores, if one exists
        let first_hint = 2 * cfg.hand_size;
        if let Some(&h) = legal
            .iter()
            .find(|&&a| a >= first_hint && !self.signals.contains(&a))
        {
            return h;
        }
        if let Some(&h) = legal.iter().find(|&&a| a >= first_hint) {
            return h;
        }

        // 5. forced: lowest legal action
        *legal.iter().min().unwrap()
    }
}

impl Policy for ScriptedConvention {
    fn name(&self) -> String {
        format!("scripted-{}", self.seed)
    }

    fn num_actions(&self) -> usize {
        self.game.num_actions()
    }

    fn begin_episode(&self) -> PolicyCtx {
        Box::new(Ctx { last_obs: None })
    }

    fn observe(&self, ctx: &mut PolicyCtx, obs: &ObservationFeatures) -> Result<()> {
        let ctx = ctx
            .downcast_mut::<Ctx>()
            .ok_or_else(|| PolicyError::Contract("foreign policy context".into()))?;
        ctx.last_obs = Some(obs.clone());
        Ok(())
    }

    fn action_probs(&self, ctx: &PolicyCtx, legal: &[usize]) -> Result<Vec<f64>> {
        if legal.is_empty() {
            return Err(PolicyError::Contract("empty legal action set".into()));
        }
        let ctx = ctx
            .downcast_ref::<Ctx>()
            .ok_or_else(|| PolicyError::Contract("foreign policy context".into()))?;
        let obs = ctx
            .last_obs
            .as_ref()
            .ok_or_else(|| PolicyError::Contract("action requested before any observation".into()))?;
        let choice = self.decide(obs, legal);
        let mut probs = vec![0.0; self.num_actions()];
        probs[choice] = 1.0;
        Ok(probs)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
