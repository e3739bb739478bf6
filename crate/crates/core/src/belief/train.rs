//! Belief-model training: replay generation from a policy pool, the
//! Adam + warmup training loop for the attention model, and the matched
//! GRU baseline trainer.

use super::net::{BeliefNet, EmbedderConfig, NetMode, RecurrentBelief};
use super::replay::{ReplayBuffer, ReplayRecord};
use super::{BeliefError, Result};
use crate::env::Game;
use crate::policy::{run_episode, ActMode, PolicyPool};
use crate::tensor::{adam_step, OptimState, Tape};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_feature: usize,
    pub feedforward: usize,
    pub batch: usize,
    pub dropout: f64,
    pub lr: f64,
    pub warmup: u64,
    pub steps: u64,
    pub seed: u64,
    pub buffer_capacity: usize,
    /// Games generated up front (single-threaded mode) or required before
    /// the first gradient step (threaded mode).
    pub prefill_games: usize,
    pub eval_games: usize,
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 2,
            heads: 4,
            d: 64,
            d_feature: 32,
            feedforward: 256,
            batch: 64,
            dropout: 0.1,
            lr: 2.5e-4,
            warmup: 1000,
            steps: 20_000,
            seed: 0,
            buffer_capacity: 50_000,
            prefill_games: 2_000,
            eval_games: 200,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn embedder(&self, pool: &PolicyPool) -> EmbedderConfig {
        EmbedderConfig::from_game(
            pool.game.as_ref(),
            self.layers,
            self.heads,
            self.d,
            self.d_feature,
            self.feedforward,
            self.dropout,
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrainMode {
    SingleThread,
    Threaded { workers: usize },
}

/// One row of the loss curve CSV: step, learning rate, train CE, eval CE.
#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub train_ce: f64,
    pub eval_ce: f64,
}

fn play_record(pool: &PolicyPool, game_seed: u64) -> Result<Vec<ReplayRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(game_seed.wrapping_mul(0xa0761d6478bd642f));
    // uniform pool-member draw per game, self-play pairing
    let pid = rng.gen_range(0..pool.members.len());
    let policy = pool.members[pid].as_ref();
    let ep = run_episode(&pool.game, [policy, policy], game_seed, ActMode::Sample)?;
    let mut out = Vec::with_capacity(2);
    for agent in 0..2 {
        let traj = ep.trajectories[agent].clone();
        let hidden = ep
            .states
            .iter()
            .take(traj.steps.len())
            .map(|s| pool.game.hidden_features(s, agent))
            .collect();
        out.push(ReplayRecord {
            agent,
            trajectory: traj,
            hidden,
            policy_id: pid,
        });
    }
    Ok(out)
}

/// Plays `num_games` pool self-play games in parallel; two records (one per
/// seat) per game. Seeds are `base_seed + game index`.
pub fn generate_replay_data(
    pool: &PolicyPool,
    num_games: usize,
    base_seed: u64,
) -> Result<Vec<ReplayRecord>> {
    let batches: Vec<Vec<ReplayRecord>> = (0..num_games)
        .into_par_iter()
        .map(|g| play_record(pool, base_seed.wrapping_add(g as u64)))
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Fixed held-out evaluation set: (prefix trajectory, true hand) pairs.
fn eval_set(
    pool: &PolicyPool,
    games: usize,
    seed: u64,
) -> Result<Vec<(crate::env::Trajectory, crate::env::HiddenFeatures)>> {
    let records = generate_replay_data(pool, games, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ce_b00c);
    Ok(records
        .iter()
        .map(|r| {
            let (traj, hand) = r.sample_example(&mut rng);
            (traj, hand.clone())
        })
        .collect())
}

fn eval_ce(net: &BeliefNet, set: &[(crate::env::Trajectory, crate::env::HiddenFeatures)]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (traj, hand) in set {
        if !hand.occupied.iter().any(|&o| o) {
            continue;
        }
        total += net.nll(traj, hand)?;
        n += 1;
    }
    if n == 0 {
        return Err(BeliefError::Contract("empty evaluation set".into()));
    }
    Ok(total / n as f64)
}

const STARVATION_TIMEOUT: Duration = Duration::from_secs(60);

/// Trains the attention belief on pool self-play. Single-threaded mode
/// pre-generates `prefill_games` and is fully deterministic per seed;
/// threaded mode runs generator workers against the shared buffer.
pub fn train_belief(
    pool: Arc<PolicyPool>,
    config: &TrainConfig,
    mode: TrainMode,
) -> Result<(BeliefNet, Vec<LossPoint>)> {
    let mut net = BeliefNet::new(config.embedder(&pool), config.seed)?;
    let buffer = Arc::new(ReplayBuffer::new(config.buffer_capacity));
    let eval = eval_set(&pool, config.eval_games.max(1), config.seed ^ 0x00e1_a55e_55e7)?;

    let stop = Arc::new(AtomicBool::new(false));
    let mut handles = Vec::new();
    match mode {
        TrainMode::SingleThread => {
            for r in generate_replay_data(&pool, config.prefill_games, config.seed)? {
                buffer.push(r);
            }
        }
        TrainMode::Threaded { workers } => {
            let counter = Arc::new(AtomicU64::new(0));
            for _ in 0..workers.max(1) {
                let pool = pool.clone();
                let buffer = buffer.clone();
                let stop = stop.clone();
                let counter = counter.clone();
                let base = config.seed;
                handles.push(std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        let g = counter.fetch_add(1, Ordering::Relaxed);
                        match play_record(&pool, base.wrapping_add(g)) {
                            Ok(records) => {
                                for r in records {
                                    buffer.push(r);
                                }
                            }
                            Err(_) => break,
                        }
                    }
                }));
            }
            // wait for the prefill target before the first gradient step
            let deadline = Instant::now() + STARVATION_TIMEOUT;
            while (buffer.total_inserted() as usize) < config.prefill_games.max(1) {
                if Instant::now() > deadline {
                    stop.store(true, Ordering::Relaxed);
                    for h in handles {
                        let _ = h.join();
                    }
                    return Err(BeliefError::Contract(
                        "replay workers starved the trainer: no data within timeout".into(),
                    ));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }

    let result = train_loop(&mut net, &buffer, config, &eval);
    stop.store(true, Ordering::Relaxed);
    for h in handles {
        let _ = h.join();
    }
    let curve = result?;
    Ok((net, curve))
}

fn train_loop(
    net: &mut BeliefNet,
    buffer: &ReplayBuffer,
    config: &TrainConfig,
    eval: &[(crate::env::Trajectory, crate::env::HiddenFeatures)],
) -> Result<Vec<LossPoint>> {
    let mut opt = OptimState::new(config.lr, config.warmup);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a41_1007);
    let mut curve = Vec::new();
    for step in 1..=config.steps {
        let Some(batch) = buffer.sample(config.batch, &mut rng) else {
            return Err(BeliefError::Contract(
                "replay buffer empty at training time".into(),
            ));
        };
        let lr = opt.next_lr();
        let mut grads = net.params.zero_grads();
        let mut train_ce = 0.0;
        let mut used = 0usize;
        for record in &batch {
            let (traj, hand) = record.sample_example(&mut rng);
            if !hand.occupied.iter().any(|&o| o) {
                continue;
            }
            let mut tape = Tape::new();
            let out = net.forward(
                &mut tape,
                &traj,
                hand,
                NetMode::Train,
                None,
                Some(&mut rng),
            )?;
            let ce = tape.cross_entropy(out.logits, &hand.slots, &hand.occupied)?;
            train_ce += tape.value(ce).data[0];
            let scaled = tape.scale(ce, 1.0 / config.batch as f64);
            let g = tape.backward(scaled)?;
            tape.accumulate_param_grads(&g, &mut grads);
            used += 1;
        }
        if used == 0 {
            continue;
        }
        adam_step(&mut net.params, &grads, &mut opt)?;
        if step % config.eval_every == 0 || step == config.steps {
            curve.push(LossPoint {
                step,
                lr,
                train_ce: train_ce / used as f64,
                eval_ce: eval_ce(net, eval)?,
            });
        }
    }
    Ok(curve)
}

/// Trains the parameter-matched GRU baseline on the same replay
/// distribution (single-threaded).
pub fn train_recurrent_baseline(
    pool: Arc<PolicyPool>,
    config: &TrainConfig,
) -> Result<(RecurrentBelief, Vec<LossPoint>)> {
    let embedder = config.embedder(&pool);
    let hidden = RecurrentBelief::matched_hidden(&embedder)?;
    let mut net = RecurrentBelief::new(embedder, hidden, config.seed)?;
    let buffer = ReplayBuffer::new(config.buffer_capacity);
    for r in generate_replay_data(&pool, config.prefill_games, config.seed)? {
        buffer.push(r);
    }
    let eval = eval_set(&pool, config.eval_games.max(1), config.seed ^ 0x00e1_a55e_55e7)?;
    let mut opt = OptimState::new(config.lr, config.warmup);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a20_1007);
    let mut curve = Vec::new();
    for step in 1..=config.steps {
        let Some(batch) = buffer.sample(config.batch, &mut rng) else {
            return Err(BeliefError::Contract(
                "replay buffer empty at training time".into(),
            ));
        };
        let lr = opt.next_lr();
        let mut grads = net.params.zero_grads();
        let mut train_ce = 0.0;
        let mut used = 0usize;
        for record in &batch {
            let (traj, hand) = record.sample_example(&mut rng);
            if !hand.occupied.iter().any(|&o| o) {
                continue;
            }
            let mut tape = Tape::new();
            let logits = net.forward(&mut tape, &traj, hand)?;
            let ce = tape.cross_entropy(logits, &hand.slots, &hand.occupied)?;
            train_ce += tape.value(ce).data[0];
            let scaled = tape.scale(ce, 1.0 / config.batch as f64);
            let g = tape.backward(scaled)?;
            tape.accumulate_param_grads(&g, &mut grads);
            used += 1;
        }
        if used == 0 {
            continue;
        }
        adam_step(&mut net.params, &grads, &mut opt)?;
        if step % config.eval_every == 0 || step == config.steps {
            let mut total = 0.0;
            let mut n = 0usize;
            for (traj, hand) in &eval {
                if hand.occupied.iter().any(|&o| o) {
                    total += net.nll(traj, hand)?;
                    n += 1;
                }
            }
            curve.push(LossPoint {
                step,
                lr,
                train_ce: train_ce / used as f64,
                eval_ce: total / n.max(1) as f64,
            });
        }
    }
    Ok((net, curve))
}
