//! Recurrent Q policy: a GRU over one-hot observation features trained by
//! independent Q-learning in self-play, with annealed epsilon-greedy
//! exploration, a periodically-synced target network, n-step returns, and
//! a side channel carrying the partner's greedy action during training
//! rollouts (fed a null token at inference time).

use super::{Policy, PolicyCtx, PolicyError, Result};
use crate::env::{Game, MiniHanabi, ObservationFeatures};
use crate::tensor::{Checkpoint, OptimState, ParamSet, Tape, Tensor, VarId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct QConfig {
    pub hidden: usize,
    pub n_step: usize,
    /// Discount per own decision point.
    pub gamma: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the episode budget over which epsilon anneals linearly.
    pub eps_anneal_frac: f64,
    pub target_update_every: usize,
    /// Append the partner's greedy action to training-time observations.
    pub sad: bool,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            hidden: 32,
            n_step: 3,
            gamma: 1.0,
            lr: 2.5e-4,
            warmup_steps: 100,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_frac: 0.4,
            target_update_every: 50,
            sad: true,
        }
    }
}

const PARAM_NAMES: [&str; 11] = [
    "w_xz", "w_hz", "b_z", "w_xr", "w_hr", "b_r", "w_xc", "w_hc", "b_c", "w_out", "b_out",
];

pub struct RecurrentQPolicy {
    game: Arc<MiniHanabi>,
    pub config: QConfig,
    pub seed: u64,
    params: ParamSet,
}

struct Ctx {
    h: Vec<f64>,
}

impl RecurrentQPolicy {
    /// Input width: one-hot feature vocabulary plus the greedy-action side
    /// channel (null token + one slot per action).
    fn input_dim(game: &MiniHanabi, _config: &QConfig) -> usize {
        game.feature_schema().vocab_size() + game.num_actions() + 1
    }

    pub fn new(game: Arc<MiniHanabi>, config: QConfig, seed: u64) -> Self {
        let x_dim = Self::input_dim(&game, &config);
        let h = config.hidden;
        let a = game.num_actions();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd1342543de82ef95));
        let mut init = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = ParamSet::new();
        for name in PARAM_NAMES {
            let t = match name {
                "w_xz" | "w_xr" | "w_xc" => init(&[x_dim, h]),
                "w_hz" | "w_hr" | "w_hc" => init(&[h, h]),
                "b_z" | "b_r" | "b_c" => Tensor::zeros(&[h]),
                "w_out" => init(&[h, a]),
                "b_out" => Tensor::zeros(&[a]),
                _ => unreachable!(),
            };
            params.add(name, t);
        }
        RecurrentQPolicy {
            game,
            config,
            seed,
            params,
        }
    }

    /// Active one-hot indices for an observation plus side-channel token
    /// (None = null token).
    fn input_indices(&self, obs: &ObservationFeatures, sad_greedy: Option<usize>) -> Vec<usize> {
        let schema = self.game.feature_schema();
        let mut ix = Vec::with_capacity(schema.num_features() + 1);
        let mut offset = 0;
        for (k, &card) in schema.cardinalities.iter().enumerate() {
            ix.push(offset + obs.values[k] as usize);
            offset += card;
        }
        ix.push(offset + sad_greedy.map(|g| g + 1).unwrap_or(0));
        ix
    }

    fn gru_step_raw(params: &ParamSet, idx: &ParamIdx, active: &[usize], h: &[f64]) -> Vec<f64> {
        let hd = h.len();
        let sparse = |w: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; hd];
            for &i in active {
                let row = &w.data[i * hd..(i + 1) * hd];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += r;
                }
            }
            out
        };
        let dense = |u: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; hd];
            for (p, &hp) in h.iter().enumerate() {
                if hp == 0.0 {
                    continue;
                }
                let row = &u.data[p * hd..(p + 1) * hd];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += hp * r;
                }
            }
            out
        };
        let xz = sparse(params.get(idx.w_xz));
        let hz = dense(params.get(idx.w_hz));
        let xr = sparse(params.get(idx.w_xr));
        let hr = dense(params.get(idx.w_hr));
        let xc = sparse(params.get(idx.w_xc));
        let bz = &params.get(idx.b_z).data;
        let br = &params.get(idx.b_r).data;
        let bc = &params.get(idx.b_c).data;
        let z: Vec<f64> = (0..hd)
            .map(|j| 1.0 / (1.0 + (-(xz[j] + hz[j] + bz[j])).exp()))
            .collect();
        let r: Vec<f64> = (0..hd)
            .map(|j| 1.0 / (1.0 + (-(xr[j] + hr[j] + br[j])).exp()))
            .collect();
        let rh: Vec<f64> = (0..hd).map(|j| r[j] * h[j]).collect();
        let hc = {
            let u = params.get(idx.w_hc);
            let mut out = vec![0.0; hd];
            for (p, &hp) in rh.iter().enumerate() {
                if hp == 0.0 {
                    continue;
                }
                let row = &u.data[p * hd..(p + 1) * hd];
                for (o, r) in out.iter_mut().zip(row) {
                    *o += hp * r;
                }
            }
            out
        };
        (0..hd)
            .map(|j| {
                let c = (xc[j] + hc[j] + bc[j]).tanh();
                (1.0 - z[j]) * c + z[j] * h[j]
            })
            .collect()
    }

    fn q_values_raw(params: &ParamSet, idx: &ParamIdx, h: &[f64]) -> Vec<f64> {
        let w = params.get(idx.w_out);
        let b = &params.get(idx.b_out).data;
        let a = b.len();
        let mut q = b.clone();
        for (p, &hp) in h.iter().enumerate() {
            let row = &w.data[p * a..(p + 1) * a];
            for (o, r) in q.iter_mut().zip(row) {
                *o += hp * r;
            }
        }
        q
    }

    fn param_idx(params: &ParamSet) -> ParamIdx {
        let i = |n: &str| params.index_of(n).expect("known param");
        ParamIdx {
            w_xz: i("w_xz"),
            w_hz: i("w_hz"),
            b_z: i("b_z"),
            w_xr: i("w_xr"),
            w_hr: i("w_hr"),
            b_r: i("b_r"),
            w_xc: i("w_xc"),
            w_hc: i("w_hc"),
            b_c: i("b_c"),
            w_out: i("w_out"),
            b_out: i("b_out"),
        }
    }

    fn greedy_over(q: &[f64], legal: &[usize]) -> usize {
        let mut best = legal[0];
        let mut best_q = f64::NEG_INFINITY;
        for &a in legal {
            if q[a] > best_q {
                best_q = q[a];
                best = a;
            }
        }
        best
    }

    pub fn to_checkpoint(&self, permutation: Vec<usize>) -> Checkpoint {
        let meta = super::PolicyMeta {
            kind: "recurrent-q".into(),
            permutation,
            seed: self.seed,
            config_digest_hex: super::digest_hex(&self.game.config.digest()),
            extra: serde_json::to_value(&self.config).unwrap(),
        };
        Checkpoint::from_params(
            self.game.config.digest(),
            serde_json::to_string(&meta).unwrap(),
            &self.params,
        )
    }

    pub fn from_checkpoint(game: Arc<MiniHanabi>, ckpt: &Checkpoint) -> Result<Self> {
        let meta: super::PolicyMeta = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| PolicyError::Checkpoint(format!("bad metadata: {e}")))?;
        let config: QConfig = serde_json::from_value(meta.extra.clone())
            .map_err(|e| PolicyError::Checkpoint(format!("bad q config: {e}")))?;
        let params = ckpt.clone().into_params();
        for name in PARAM_NAMES {
            if params.index_of(name).is_none() {
                return Err(PolicyError::Checkpoint(format!("missing tensor {name}")));
            }
        }
        Ok(RecurrentQPolicy {
            game,
            config,
            seed: meta.seed,
            params,
        })
    }
}

struct ParamIdx {
    w_xz: usize,
    w_hz: usize,
    b_z: usize,
    w_xr: usize,
    w_hr: usize,
    b_r: usize,
    w_xc: usize,
    w_hc: usize,
    b_c: usize,
    w_out: usize,
    b_out: usize,
}

impl Policy for RecurrentQPolicy {
    fn name(&self) -> String {
        format!("recurrent-q-{}", self.seed)
    }

    fn num_actions(&self) -> usize {
        self.game.num_actions()
    }

    fn begin_episode(&self) -> PolicyCtx {
        Box::new(Ctx {
            h: vec![0.0; self.config.hidden],
        })
    }

    fn observe(&self, ctx: &mut PolicyCtx, obs: &ObservationFeatures) -> Result<()> {
        let ctx = ctx
            .downcast_mut::<Ctx>()
            .ok_or_else(|| PolicyError::Contract("foreign policy context".into()))?;
        let active = self.input_indices(obs, None);
        let idx = Self::param_idx(&self.params);
        ctx.h = Self::gru_step_raw(&self.params, &idx, &active, &ctx.h);
        if ctx.h.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Diverged("non-finite recurrent state".into()));
        }
        Ok(())
    }

    fn action_probs(&self, ctx: &PolicyCtx, legal: &[usize]) -> Result<Vec<f64>> {
        if legal.is_empty() {
            return Err(PolicyError::Contract("empty legal action set".into()));
        }
        let ctx = ctx
            .downcast_ref::<Ctx>()
            .ok_or_else(|| PolicyError::Contract("foreign policy context".into()))?;
        let idx = Self::param_idx(&self.params);
        let q = Self::q_values_raw(&self.params, &idx, &ctx.h);
        if q.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Diverged("non-finite Q values".into()));
        }
        let best = Self::greedy_over(&q, legal);
        let mut probs = vec![0.0; q.len()];
        probs[best] = 1.0;
        Ok(probs)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// One agent's record of a training episode.
struct AgentTrace {
    /// Active input indices per consumed observation.
    inputs: Vec<Vec<usize>>,
    /// (input index at decision time, action taken, legal set).
    decisions: Vec<(usize, usize, Vec<usize>)>,
    /// Reward accumulated from each own decision to the next (or terminal).
    returns_between: Vec<f64>,
}

/// Trains a recurrent Q policy by independent Q-learning in self-play.
/// `budget` is the number of training episodes; 0 returns the initialized
/// policy unchanged.
pub fn train_selfplay(
    game: Arc<MiniHanabi>,
    config: QConfig,
    seed: u64,
    budget: usize,
) -> Result<RecurrentQPolicy> {
    let mut policy = RecurrentQPolicy::new(game.clone(), config.clone(), seed);
    if budget == 0 {
        return Ok(policy);
    }
    let mut target = policy.params.clone();
    let mut optim = OptimState::new(config.lr, config.warmup_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6a09e667f3bcc909));
    let anneal = (budget as f64 * config.eps_anneal_frac).max(1.0);

    for episode in 0..budget {
        let eps = (config.eps_start
            + (config.eps_end - config.eps_start) * (episode as f64 / anneal))
            .max(config.eps_end);
        let traces = rollout_training_episode(&game, &policy, eps, seed, episode, &mut rng)?;
        let grads = episode_gradients(&policy, &target, &traces)?;
        crate::tensor::adam_step(&mut policy.params, &grads, &mut optim)
            .map_err(|e| PolicyError::Diverged(format!("{e}")))?;
        if (episode + 1) % config.target_update_every == 0 {
            target = policy.params.clone();
        }
    }
    Ok(policy)
}

fn rollout_training_episode(
    game: &MiniHanabi,
    policy: &RecurrentQPolicy,
    eps: f64,
    seed: u64,
    episode: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AgentTrace>> {
    let idx = RecurrentQPolicy::param_idx(&policy.params);
    let game_seed = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(episode as u64);
    let mut state = game.new_game(game_seed);
    let mut h: Vec<Vec<f64>> = vec![vec![0.0; policy.config.hidden]; 2];
    let mut traces: Vec<AgentTrace> = (0..2)
        .map(|_| AgentTrace {
            inputs: Vec::new(),
            decisions: Vec::new(),
            returns_between: Vec::new(),
        })
        .collect();
    // initial observations carry the null side-channel token
    for p in 0..2 {
        let active = policy.input_indices(&game.observe(&state, p), None);
        h[p] = RecurrentQPolicy::gru_step_raw(&policy.params, &idx, &active, &h[p]);
        traces[p].inputs.push(active);
    }
    // reward accrued since each agent's latest decision
    let mut accrued = [0.0f64; 2];
    let mut has_decided = [false; 2];

    while !game.is_terminal(&state) {
        let actor = game.current_player(&state);
        let legal = game.legal_actions(&state)?;
        let q = RecurrentQPolicy::q_values_raw(&policy.params, &idx, &h[actor]);
        if q.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Diverged(format!(
                "non-finite Q at episode {episode}"
            )));
        }
        let greedy = RecurrentQPolicy::greedy_over(&q, &legal);
        let action = if rng.gen::<f64>() < eps {
            legal[rng.gen_range(0..legal.len())]
        } else {
            greedy
        };
        if has_decided[actor] {
            traces[actor].returns_between.push(accrued[actor]);
        }
        accrued[actor] = 0.0;
        has_decided[actor] = true;
        let last_input = traces[actor].inputs.len() - 1;
        traces[actor].decisions.push((last_input, action, legal.clone()));

        let out = game.step(&state, action)?;
        accrued[0] += out.reward;
        accrued[1] += out.reward;
        for p in 0..2 {
            let sad = if policy.config.sad && p != actor {
                Some(greedy)
            } else {
                None
            };
            let active = policy.input_indices(&game.observe(&out.state, p), sad);
            h[p] = RecurrentQPolicy::gru_step_raw(&policy.params, &idx, &active, &h[p]);
            traces[p].inputs.push(active);
        }
        state = out.state;
    }
    for p in 0..2 {
        if has_decided[p] {
            traces[p].returns_between.push(accrued[p]);
        }
    }
    Ok(traces)
}

/// n-step TD(0) gradients for one episode, bootstrapping from the target
/// network's greedy value.
fn episode_gradients(
    policy: &RecurrentQPolicy,
    target: &ParamSet,
    traces: &[AgentTrace],
) -> Result<Vec<Tensor>> {
    let cfg = &policy.config;
    let idx = RecurrentQPolicy::param_idx(&policy.params);
    let mut grads = policy.params.zero_grads();
    let mut total_count = 0usize;
    let mut tape = Tape::new();
    let p_ids: Vec<VarId> = (0..policy.params.len())
        .map(|i| tape.param(&policy.params, i))
        .collect();
    let mut sq_terms: Vec<VarId> = Vec::new();

    for trace in traces {
        if trace.decisions.is_empty() {
            continue;
        }
        // bootstrap values under the target network
        let mut th = vec![0.0; cfg.hidden];
        let mut target_q_at_decision: Vec<Vec<f64>> = Vec::new();
        let mut next_decision = 0usize;
        for (t, active) in trace.inputs.iter().enumerate() {
            th = RecurrentQPolicy::gru_step_raw(target, &idx, active, &th);
            while next_decision < trace.decisions.len() && trace.decisions[next_decision].0 == t {
                target_q_at_decision.push(RecurrentQPolicy::q_values_raw(target, &idx, &th));
                next_decision += 1;
            }
        }
        let k_max = trace.decisions.len();
        let targets: Vec<f64> = (0..k_max)
            .map(|k| {
                let mut y = 0.0;
                let mut disc = 1.0;
                let horizon = (k + cfg.n_step).min(k_max);
                for m in k..horizon {
                    y += disc * trace.returns_between[m];
                    disc *= cfg.gamma;
                }
                if horizon < k_max {
                    let q = &target_q_at_decision[horizon];
                    let legal = &trace.decisions[horizon].2;
                    y += disc * legal.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max);
                }
                y
            })
            .collect();

        // taped forward pass under the online network
        let hd = cfg.hidden;
        let mut hv = tape.leaf(Tensor::zeros(&[1, hd]));
        let mut next_decision = 0usize;
        for (t, active) in trace.inputs.iter().enumerate() {
            hv = gru_step_tape(&mut tape, &p_ids, &idx, active, hv, hd)?;
            while next_decision < trace.decisions.len() && trace.decisions[next_decision].0 == t {
                let (_, action, _) = &trace.decisions[next_decision];
                let wq = tape.matmul(hv, p_ids[idx.w_out])?;
                let q = tape.add_bias(wq, p_ids[idx.b_out]);
                let sel = tape.slice_cols(q, *action, 1);
                let y = tape.leaf(Tensor::new(vec![1, 1], vec![targets[next_decision]]));
                let diff = tape.sub(sel, y);
                sq_terms.push(tape.mul(diff, diff));
                total_count += 1;
                next_decision += 1;
            }
        }
    }

    if total_count == 0 {
        return Ok(grads);
    }
    let all = tape.concat_cols(&sq_terms);
    let sum = tape.sum(all);
    let loss = tape.scale(sum, 1.0 / total_count as f64);
    let g = tape.backward(loss)?;
    tape.accumulate_param_grads(&g, &mut grads);
    Ok(grads)
}

fn gru_step_tape(
    tape: &mut Tape,
    p_ids: &[VarId],
    idx: &ParamIdx,
    active: &[usize],
    h: VarId,
    hidden: usize,
) -> Result<VarId> {
    let _ = hidden;
    let ones = tape.leaf(Tensor::full(&[1, active.len()], 1.0));
    let sparse = |tape: &mut Tape, table: VarId| -> crate::tensor::Result<VarId> {
        let rows = tape.gather(table, active.to_vec())?;
        tape.matmul(ones, rows)
    };
    let xz = sparse(tape, p_ids[idx.w_xz])?;
    let hz = tape.matmul(h, p_ids[idx.w_hz])?;
    let z = {
        let s = tape.add(xz, hz);
        let s = tape.add_bias(s, p_ids[idx.b_z]);
        tape.sigmoid(s)
    };
    let xr = sparse(tape, p_ids[idx.w_xr])?;
    let hr = tape.matmul(h, p_ids[idx.w_hr])?;
    let r = {
        let s = tape.add(xr, hr);
        let s = tape.add_bias(s, p_ids[idx.b_r]);
        tape.sigmoid(s)
    };
    let xc = sparse(tape, p_ids[idx.w_xc])?;
    let rh = tape.mul(r, h);
    let hc = tape.matmul(rh, p_ids[idx.w_hc])?;
    let c = {
        let s = tape.add(xc, hc);
        let s = tape.add_bias(s, p_ids[idx.b_c]);
        tape.tanh(s)
    };
    // h' = (1 - z) * c + z * h
    let neg_z = tape.scale(z, -1.0);
    let one_minus_z = tape.add_scalar(neg_z, 1.0);
    let a = tape.mul(one_minus_z, c);
    let b = tape.mul(z, h);
    Ok(tape.add(a, b))
}
