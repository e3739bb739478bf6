//! Pools of convention-divergent policies: deterministic scripted
//! conventions keyed by seed, recurrent Q-learners trained in self-play,
//! and color-relabelled variants of either. Policies are immutable once
//! built; evaluation fans games out in parallel with per-game seeds.

mod recurrent_q;
mod scripted;

pub use recurrent_q::{train_selfplay, QConfig, RecurrentQPolicy};
pub use scripted::ScriptedConvention;

use crate::env::{
    EnvError, Game, HanabiState, MiniHanabi, ObservationFeatures, TrajStep, Trajectory,
};
use crate::tensor::{Checkpoint, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::any::Any;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Per-episode mutable policy state (recurrent hidden state, cached
/// observation, ...). Opaque to callers.
pub type PolicyCtx = Box<dyn Any + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Greedy,
    Sample,
}

/// A stationary policy over action-observation histories. The caller feeds
/// every observation of the episode (its own turns and the partner's) in
/// order via `observe`; `action_probs` may be queried whenever it is the
/// policy's turn.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    fn num_actions(&self) -> usize;

    fn begin_episode(&self) -> PolicyCtx;

    fn observe(&self, ctx: &mut PolicyCtx, obs: &ObservationFeatures) -> Result<()>;

    /// Probability of each action id (length `num_actions`), zero outside
    /// `legal`. Deterministic policies return an indicator vector.
    fn action_probs(&self, ctx: &PolicyCtx, legal: &[usize]) -> Result<Vec<f64>>;

    /// Concrete-type access for checkpointing.
    fn as_any(&self) -> &dyn Any;
}

/// Draws an action from `action_probs`: greedy takes the argmax (lowest id
/// on ties), sample draws from the distribution.
pub fn act(
    policy: &dyn Policy,
    ctx: &PolicyCtx,
    legal: &[usize],
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if legal.is_empty() {
        return Err(PolicyError::Contract("empty legal action set".into()));
    }
    let probs = policy.action_probs(ctx, legal)?;
    match mode {
        ActMode::Greedy => {
            let mut best = legal[0];
            let mut best_p = f64::NEG_INFINITY;
            for &a in legal {
                if probs[a] > best_p {
                    best_p = probs[a];
                    best = a;
                }
            }
            Ok(best)
        }
        ActMode::Sample => {
            let total: f64 = legal.iter().map(|&a| probs[a]).sum();
            if total <= 0.0 {
                return Err(PolicyError::Contract(
                    "action_probs sums to zero on legal set".into(),
                ));
            }
            let mut u = rng.gen::<f64>() * total;
            for &a in legal {
                u -= probs[a];
                if u <= 0.0 {
                    return Ok(a);
                }
            }
            Ok(*legal.last().unwrap())
        }
    }
}

/// One finished game between two policies.
pub struct EpisodeRecord {
    pub states: Vec<HanabiState>,
    pub trajectories: Vec<Trajectory>,
    pub score: f64,
}

/// Plays one seeded game, recording both agents' histories. Action
/// sampling (in Sample mode) is driven by a stream derived from `seed`.
pub fn run_episode(
    game: &MiniHanabi,
    players: [&dyn Policy; 2],
    seed: u64,
    mode: ActMode,
) -> Result<EpisodeRecord> {
    run_episode_from(game, game.new_game(seed), players, seed, mode)
}

/// Like [`run_episode`] but starting from a given (fresh) state, as search
/// rollouts from injected states require.
pub fn run_episode_from(
    game: &MiniHanabi,
    initial: HanabiState,
    players: [&dyn Policy; 2],
    seed: u64,
    mode: ActMode,
) -> Result<EpisodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1e995u64);
    let mut state = initial;
    let mut states = vec![state.clone()];
    let mut ctxs: Vec<PolicyCtx> = players.iter().map(|p| p.begin_episode()).collect();
    let mut trajs: Vec<Trajectory> = (0..2)
        .map(|p| Trajectory::new(p, game.observe(&state, p)))
        .collect();
    for p in 0..2 {
        let obs = trajs[p].steps[0].obs.clone();
        players[p].observe(&mut ctxs[p], &obs)?;
    }
    while !game.is_terminal(&state) {
        let actor = game.current_player(&state);
        let legal = game.legal_actions(&state)?;
        let action = act(players[actor], &ctxs[actor], &legal, mode, &mut rng)?;
        let pre_hand = state.hands[actor].clone();
        let out = game.step(&state, action)?;
        let reveal = if action < 2 * game.config.hand_size {
            Some(pre_hand[action % game.config.hand_size])
        } else {
            None
        };
        for p in 0..2 {
            let obs = game.observe(&out.state, p);
            players[p].observe(&mut ctxs[p], &obs)?;
            trajs[p].steps.push(TrajStep {
                obs,
                actor: Some(actor),
                action: Some(action),
                own_reveal: if p == actor { reveal } else { None },
            });
            trajs[p].rewards.push(out.reward);
            trajs[p].terminal = out.terminal;
        }
        state = out.state;
        states.push(state.clone());
    }
    let score = state.score as f64;
    Ok(EpisodeRecord {
        states,
        trajectories: trajs,
        score,
    })
}

/// Uniform-random baseline: equal probability on every legal action.
pub struct UniformRandom {
    num_actions: usize,
}

impl UniformRandom {
    pub fn new(game: &MiniHanabi) -> Self {
        Self::with_actions(game.num_actions())
    }

    pub fn with_actions(num_actions: usize) -> Self {
        UniformRandom { num_actions }
    }
}

impl Policy for UniformRandom {
    fn name(&self) -> String {
        "uniform-random".into()
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn begin_episode(&self) -> PolicyCtx {
        Box::new(())
    }

    fn observe(&self, _ctx: &mut PolicyCtx, _obs: &ObservationFeatures) -> Result<()> {
        Ok(())
    }

    fn action_probs(&self, _ctx: &PolicyCtx, legal: &[usize]) -> Result<Vec<f64>> {
        if legal.is_empty() {
            return Err(PolicyError::Contract("empty legal action set".into()));
        }
        let mut probs = vec![0.0; self.num_actions];
        let p = 1.0 / legal.len() as f64;
        for &a in legal {
            probs[a] = p;
        }
        Ok(probs)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `inner` conjugated by a color permutation: it sees the world relabelled
/// by the inverse permutation and its actions are relabelled back.
pub struct Relabelled {
    game: Arc<MiniHanabi>,
    inner: Arc<dyn Policy>,
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

impl Relabelled {
    pub fn new(game: Arc<MiniHanabi>, inner: Arc<dyn Policy>, perm: Vec<usize>) -> Result<Self> {
        if !is_permutation(&perm, game.config.num_colors) {
            return Err(PolicyError::Contract(format!(
                "{perm:?} is not a permutation of {} colors",
                game.config.num_colors
            )));
        }
        let inverse = invert_permutation(&perm);
        Ok(Relabelled {
            game,
            inner,
            perm,
            inverse,
        })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

impl Policy for Relabelled {
    fn name(&self) -> String {
        format!("{}/perm{:?}", self.inner.name(), self.perm)
    }

    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn begin_episode(&self) -> PolicyCtx {
        self.inner.begin_episode()
    }

    fn observe(&self, ctx: &mut PolicyCtx, obs: &ObservationFeatures) -> Result<()> {
        let relabelled = self.game.relabel_observation(obs, &self.inverse);
        self.inner.observe(ctx, &relabelled)
    }

    fn action_probs(&self, ctx: &PolicyCtx, legal: &[usize]) -> Result<Vec<f64>> {
        let legal_inner: Vec<usize> = legal
            .iter()
            .map(|&a| self.game.relabel_action(a, &self.inverse))
            .collect();
        let probs_inner = self.inner.action_probs(ctx, &legal_inner)?;
        let mut probs = vec![0.0; probs_inner.len()];
        for (a_inner, &p) in probs_inner.iter().enumerate() {
            if p != 0.0 {
                probs[self.game.relabel_action(a_inner, &self.perm)] = p;
            }
        }
        Ok(probs)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// An immutable collection of policies sharing one game config.
#[derive(Clone)]
pub struct PolicyPool {
    pub game: Arc<MiniHanabi>,
    pub members: Vec<Arc<dyn Policy>>,
    pub provenance: Vec<String>,
}

impl PolicyPool {
    pub fn new(game: Arc<MiniHanabi>) -> Self {
        PolicyPool {
            game,
            members: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn push(&mut self, policy: Arc<dyn Policy>, note: &str) {
        self.members.push(policy);
        self.provenance.push(note.to_string());
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// A pool of scripted conventions diversified by seed and color
/// permutation: `n` members cycling through signal seeds, with every other
/// member conjugated by the color-reversal permutation.
pub fn scripted_pool(game: Arc<MiniHanabi>, n: usize, base_seed: u64) -> Result<PolicyPool> {
    let mut pool = PolicyPool::new(game.clone());
    let reversal: Vec<usize> = (0..game.config.num_colors).rev().collect();
    for i in 0..n {
        let seed = base_seed.wrapping_add(i as u64 / 2);
        let scripted = Arc::new(ScriptedConvention::new(game.clone(), seed));
        if i % 2 == 1 && game.config.num_colors > 1 {
            let note = format!("scripted seed {seed} conjugated by {reversal:?}");
            pool.push(
                Arc::new(Relabelled::new(game.clone(), scripted, reversal.clone())?),
                &note,
            );
        } else {
            pool.push(scripted, &format!("scripted seed {seed}"));
        }
    }
    Ok(pool)
}

/// Mean score and standard error for every ordered policy pairing.
#[derive(Debug, Clone)]
pub struct CrossPlayMatrix {
    pub n: usize,
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
    pub games_per_cell: usize,
}

impl CrossPlayMatrix {
    pub fn cell(&self, row: usize, col: usize) -> (f64, f64) {
        (self.mean[row * self.n + col], self.sem[row * self.n + col])
    }

    pub fn mean_diagonal(&self) -> f64 {
        (0..self.n).map(|i| self.mean[i * self.n + i]).sum::<f64>() / self.n as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s += self.mean[i * self.n + j];
                }
            }
        }
        s / (self.n * (self.n - 1)) as f64
    }
}

fn cell_seed(seed: u64, row: usize, col: usize, g: usize) -> u64 {
    // splitmix64 over a pair-unique stream id
    let mut z = seed
        .wrapping_add((row as u64) << 40)
        .wrapping_add((col as u64) << 20)
        .wrapping_add(g as u64)
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Pairs row policy (player 0) with column policy (player 1) for
/// `games_per_cell` greedy games per cell, in parallel.
pub fn crossplay_matrix(
    pool: &PolicyPool,
    games_per_cell: usize,
    seed: u64,
) -> Result<CrossPlayMatrix> {
    if games_per_cell == 0 {
        return Err(PolicyError::Contract("games_per_cell must be >= 1".into()));
    }
    let n = pool.len();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let results: Vec<Result<(f64, f64)>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut scores = Vec::with_capacity(games_per_cell);
            for g in 0..games_per_cell {
                let ep = run_episode(
                    &pool.game,
                    [pool.members[i].as_ref(), pool.members[j].as_ref()],
                    cell_seed(seed, i, j, g),
                    ActMode::Greedy,
                )?;
                scores.push(ep.score);
            }
            let m = scores.iter().sum::<f64>() / scores.len() as f64;
            let var = if scores.len() > 1 {
                scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>()
                    / (scores.len() - 1) as f64
            } else {
                0.0
            };
            Ok((m, (var / scores.len() as f64).sqrt()))
        })
        .collect();
    let mut mean = vec![0.0; n * n];
    let mut sem = vec![0.0; n * n];
    for (&(i, j), r) in cells.iter().zip(results) {
        let (m, s) = r?;
        mean[i * n + j] = m;
        sem[i * n + j] = s;
    }
    Ok(CrossPlayMatrix {
        n,
        mean,
        sem,
        games_per_cell,
    })
}

/// Checkpoint metadata shared by every policy kind.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PolicyMeta {
    pub kind: String,
    pub permutation: Vec<usize>,
    pub seed: u64,
    pub config_digest_hex: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a policy checkpoint, dispatching on the `kind` metadata field and
/// rewrapping any recorded color permutation.
pub fn load_policy(path: &Path, game: Arc<MiniHanabi>) -> Result<Arc<dyn Policy>> {
    let ckpt = crate::tensor::load_checkpoint(path)?;
    let meta: PolicyMeta = serde_json::from_str(&ckpt.metadata)
        .map_err(|e| PolicyError::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.config_digest_hex != digest_hex(&game.config.digest()) {
        return Err(PolicyError::Checkpoint(
            "checkpoint was built for a different game config".into(),
        ));
    }
    let base: Arc<dyn Policy> = match meta.kind.as_str() {
        "scripted-convention" => Arc::new(ScriptedConvention::new(game.clone(), meta.seed)),
        "recurrent-q" => Arc::new(RecurrentQPolicy::from_checkpoint(game.clone(), &ckpt)?),
        other => {
            return Err(PolicyError::Checkpoint(format!(
                "unknown policy kind {other:?}"
            )))
        }
    };
    let identity: Vec<usize> = (0..game.config.num_colors).collect();
    if meta.permutation == identity {
        Ok(base)
    } else {
        Ok(Arc::new(Relabelled::new(game, base, meta.permutation)?))
    }
}

/// Saves a policy with its kind/permutation metadata. Relabelled wrappers
/// are flattened into the `permutation` field.
pub fn save_policy(path: &Path, game: &MiniHanabi, policy: &dyn Policy) -> Result<()> {
    let ckpt = policy_checkpoint(game, policy, None)?;
    crate::tensor::save_checkpoint(path, &ckpt)?;
    Ok(())
}

fn policy_checkpoint(
    game: &MiniHanabi,
    policy: &dyn Policy,
    perm_override: Option<Vec<usize>>,
) -> Result<Checkpoint> {
    let digest = game.config.digest();
    let identity: Vec<usize> = (0..game.config.num_colors).collect();
    let perm = perm_override.unwrap_or(identity);
    if let Some(s) = policy.as_any().downcast_ref::<ScriptedConvention>() {
        let meta = PolicyMeta {
            kind: "scripted-convention".into(),
            permutation: perm,
            seed: s.seed(),
            config_digest_hex: digest_hex(&digest),
            extra: serde_json::json!({ "signals": s.signals() }),
        };
        return Ok(Checkpoint::from_params(
            digest,
            serde_json::to_string(&meta).unwrap(),
            &crate::tensor::ParamSet::new(),
        ));
    }
    if let Some(q) = policy.as_any().downcast_ref::<RecurrentQPolicy>() {
        return Ok(q.to_checkpoint(perm));
    }
    if let Some(r) = policy.as_any().downcast_ref::<Relabelled>() {
        return policy_checkpoint(game, r.inner.as_ref(), Some(r.perm.clone()));
    }
    Err(PolicyError::Checkpoint(
        "policy kind does not support checkpointing".into(),
    ))
}
