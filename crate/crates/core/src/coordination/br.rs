//! Best responses to a policy pool: a recurrent Q learner partnered each
//! episode with a pool-uniform policy, optionally conditioning on the
//! frozen belief model's encoder summary ("BR w/ generalized belief").

use super::{CoordError, Result};
use crate::belief::BeliefNet;
use crate::env::{Game, MiniHanabi, ObservationFeatures, TrajStep, Trajectory};
use crate::policy::{Policy, PolicyCtx, PolicyError, PolicyPool, QConfig};
use crate::tensor::{adam_step, Checkpoint, OptimState, ParamSet, Tape, Tensor, VarId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::any::Any;
use std::sync::Arc;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BrConfig {
    pub q: QConfig,
    pub with_belief_hidden: bool,
}

const GRU_NAMES: [&str; 11] = [
    "w_xz", "w_hz", "b_z", "w_xr", "w_hr", "b_r", "w_xc", "w_hc", "b_c", "w_out", "b_out",
];
const AUX_NAMES: [&str; 3] = ["w_az", "w_ar", "w_ac"];

/// Recurrent Q policy over one-hot observations, with an optional dense
/// auxiliary input (the frozen belief model's summary vector) feeding every
/// gate. Without the belief, the input width is exactly the plain
/// pool-partnered IQL learner's.
pub struct BestResponse {
    game: Arc<MiniHanabi>,
    pub config: QConfig,
    pub seed: u64,
    params: ParamSet,
    belief: Option<Arc<BeliefNet>>,
}

struct Ctx {
    h: Vec<f64>,
    /// AOH mirror kept only when the belief summary is conditioned on.
    history: Option<Trajectory>,
}

struct Idx {
    gru: [usize; 11],
    aux: Option<[usize; 3]>,
}

impl BestResponse {
    fn input_dim(game: &MiniHanabi) -> usize {
        game.feature_schema().vocab_size() + game.num_actions() + 1
    }

    pub fn new(
        game: Arc<MiniHanabi>,
        config: QConfig,
        belief: Option<Arc<BeliefNet>>,
        seed: u64,
    ) -> Self {
        let x_dim = Self::input_dim(&game);
        let h = config.hidden;
        let a = game.num_actions();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xe7037ed1a0b428db));
        let mut init = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = ParamSet::new();
        for name in GRU_NAMES {
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
        if let Some(net) = &belief {
            for name in AUX_NAMES {
                params.add(name, init(&[net.config.d, h]));
            }
        }
        BestResponse {
            game,
            config,
            seed,
            params,
            belief,
        }
    }

    pub fn with_belief(&self) -> bool {
        self.belief.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn idx(params: &ParamSet, aux: bool) -> Idx {
        let i = |n: &str| params.index_of(n).expect("known param");
        Idx {
            gru: GRU_NAMES.map(|n| i(n)),
            aux: aux.then(|| AUX_NAMES.map(|n| i(n))),
        }
    }

    fn input_indices(&self, obs: &ObservationFeatures, sad: Option<usize>) -> Vec<usize> {
        let schema = self.game.feature_schema();
        let mut ix = Vec::with_capacity(schema.num_features() + 1);
        let mut offset = 0;
        for (k, &card) in schema.cardinalities.iter().enumerate() {
            ix.push(offset + obs.values[k] as usize);
            offset += card;
        }
        ix.push(offset + sad.map(|g| g + 1).unwrap_or(0));
        ix
    }

    /// Plain forward GRU step with sparse one-hot input and optional dense
    /// auxiliary input into every gate preactivation.
    fn gru_step_raw(
        params: &ParamSet,
        idx: &Idx,
        active: &[usize],
        aux: Option<&[f64]>,
        h: &[f64],
    ) -> Vec<f64> {
        let hd = h.len();
        let sparse = |w: &Tensor| {
            let mut out = vec![0.0; hd];
            for &i in active {
                for (o, r) in out.iter_mut().zip(&w.data[i * hd..(i + 1) * hd]) {
                    *o += r;
                }
            }
            out
        };
        let dense = |u: &Tensor, v: &[f64]| {
            let mut out = vec![0.0; hd];
            for (p, &vp) in v.iter().enumerate() {
                if vp == 0.0 {
                    continue;
                }
                for (o, r) in out.iter_mut().zip(&u.data[p * hd..(p + 1) * hd]) {
                    *o += vp * r;
                }
            }
            out
        };
        let pre = |gate: usize, v: &[f64]| -> Vec<f64> {
            // gate: 0 = z, 1 = r, 2 = c; GRU_NAMES layout is triplets
            let mut s = sparse(params.get(idx.gru[gate * 3]));
            let hpart = dense(params.get(idx.gru[gate * 3 + 1]), v);
            let b = &params.get(idx.gru[gate * 3 + 2]).data;
            for j in 0..hd {
                s[j] += hpart[j] + b[j];
            }
            if let (Some(ax), Some(ai)) = (aux, idx.aux.as_ref()) {
                let apart = dense(params.get(ai[gate]), ax);
                for j in 0..hd {
                    s[j] += apart[j];
                }
            }
            s
        };
        let z: Vec<f64> = pre(0, h).iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let r: Vec<f64> = pre(1, h).iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let rh: Vec<f64> = (0..hd).map(|j| r[j] * h[j]).collect();
        let c: Vec<f64> = pre(2, &rh).iter().map(|s| s.tanh()).collect();
        (0..hd).map(|j| (1.0 - z[j]) * c[j] + z[j] * h[j]).collect()
    }

    fn q_values_raw(params: &ParamSet, idx: &Idx, h: &[f64]) -> Vec<f64> {
        let w = params.get(idx.gru[9]);
        let b = &params.get(idx.gru[10]).data;
        let a = b.len();
        let mut q = b.clone();
        for (p, &hp) in h.iter().enumerate() {
            for (o, r) in q.iter_mut().zip(&w.data[p * a..(p + 1) * a]) {
                *o += hp * r;
            }
        }
        q
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

    /// Frozen-belief summary for the AOH accumulated so far (stop-gradient:
    /// plain values, never on the learner's tape as parameters).
    fn summary_of(&self, history: &Trajectory) -> Result<Option<Vec<f64>>> {
        match &self.belief {
            None => Ok(None),
            Some(net) => Ok(Some(net.encode_summary(history)?.data)),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "best-response",
            "seed": self.seed,
            "config": &self.config,
            "with_belief_hidden": self.belief.is_some(),
        });
        Checkpoint::from_params(self.game.config.digest(), meta.to_string(), &self.params)
    }

    pub fn from_checkpoint(
        game: Arc<MiniHanabi>,
        ckpt: &Checkpoint,
        belief: Option<Arc<BeliefNet>>,
    ) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| CoordError::Contract(format!("bad checkpoint metadata: {e}")))?;
        let with_belief = meta["with_belief_hidden"].as_bool().unwrap_or(false);
        if with_belief && belief.is_none() {
            return Err(CoordError::Contract(
                "checkpoint conditions on a belief hidden state: pass the belief model".into(),
            ));
        }
        let config: QConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CoordError::Contract(format!("bad q config: {e}")))?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let params = ckpt.clone().into_params();
        for name in GRU_NAMES {
            if params.index_of(name).is_none() {
                return Err(CoordError::Contract(format!("missing tensor {name}")));
            }
        }
        Ok(BestResponse {
            game,
            config,
            seed,
            params,
            belief: if with_belief { belief } else { None },
        })
    }
}

impl Policy for BestResponse {
    fn name(&self) -> String {
        format!(
            "best-response-{}{}",
            self.seed,
            if self.belief.is_some() { "-belief" } else { "" }
        )
    }

    fn num_actions(&self) -> usize {
        self.game.num_actions()
    }

    fn begin_episode(&self) -> PolicyCtx {
        Box::new(Ctx {
            h: vec![0.0; self.config.hidden],
            history: self.belief.as_ref().map(|_| Trajectory {
                agent: 0,
                steps: Vec::new(),
                terminal: false,
                rewards: Vec::new(),
            }),
        })
    }

    fn observe(&self, ctx: &mut PolicyCtx, obs: &ObservationFeatures) -> crate::policy::Result<()> {
        let ctx = ctx
            .downcast_mut::<Ctx>()
            .ok_or_else(|| PolicyError::Contract("foreign policy context".into()))?;
        let aux = match &mut ctx.history {
            None => None,
            Some(hist) => {
                hist.steps.push(TrajStep {
                    obs: obs.clone(),
                    actor: None,
                    action: None,
                    own_reveal: None,
                });
                let s = self
                    .summary_of(hist)
                    .map_err(|e| PolicyError::Contract(format!("belief summary failed: {e}")))?;
                s
            }
        };
        let idx = Self::idx(&self.params, self.belief.is_some());
        let active = self.input_indices(obs, None);
        ctx.h = Self::gru_step_raw(&self.params, &idx, &active, aux.as_deref(), &ctx.h);
        if ctx.h.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Diverged("non-finite recurrent state".into()));
        }
        Ok(())
    }

    fn action_probs(&self, ctx: &PolicyCtx, legal: &[usize]) -> crate::policy::Result<Vec<f64>> {
        if legal.is_empty() {
            return Err(PolicyError::Contract("empty legal action set".into()));
        }
        let ctx = ctx
            .downcast_ref::<Ctx>()
            .ok_or_else(|| PolicyError::Contract("foreign policy context".into()))?;
        let idx = Self::idx(&self.params, self.belief.is_some());
        let q = Self::q_values_raw(&self.params, &idx, &ctx.h);
        if q.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Diverged("non-finite Q values".into()));
        }
        let best = Self::greedy_over(&q, legal);
        let mut probs = vec![0.0; q.len()];
        probs[best] = 1.0;
        Ok(probs)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

struct LearnerTrace {
    /// (active indices, auxiliary input) per consumed observation.
    inputs: Vec<(Vec<usize>, Option<Vec<f64>>)>,
    decisions: Vec<(usize, usize, Vec<usize>)>,
    returns_between: Vec<f64>,
}

/// Trains a best response against a pool: each episode partners the
/// learner with a pool-uniform policy (seat alternating), independent
/// Q-learning with n-step returns and a target network. With a belief
/// model, its frozen encoder summary augments every learner input.
pub fn train_best_response(
    pool: Arc<PolicyPool>,
    config: QConfig,
    belief: Option<Arc<BeliefNet>>,
    seed: u64,
    budget: usize,
) -> Result<BestResponse> {
    if pool.members.is_empty() {
        return Err(CoordError::Contract("empty training pool".into()));
    }
    let game = pool.game.clone();
    let mut learner = BestResponse::new(game.clone(), config.clone(), belief, seed);
    if budget == 0 {
        return Ok(learner);
    }
    let mut target = learner.params.clone();
    let mut optim = OptimState::new(config.lr, config.warmup_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xbb67ae8584caa73b));
    let anneal = (budget as f64 * config.eps_anneal_frac).max(1.0);

    for episode in 0..budget {
        let eps = (config.eps_start
            + (config.eps_end - config.eps_start) * (episode as f64 / anneal))
            .max(config.eps_end);
        let partner = pool.members[rng.gen_range(0..pool.members.len())].clone();
        let seat = episode % 2;
        let trace = rollout_vs_partner(
            &game,
            &learner,
            partner.as_ref(),
            seat,
            eps,
            seed,
            episode,
            &mut rng,
        )?;
        let grads = learner_gradients(&learner, &target, &trace)?;
        adam_step(&mut learner.params, &grads, &mut optim)
            .map_err(|e| CoordError::Contract(format!("optimizer diverged: {e}")))?;
        if (episode + 1) % config.target_update_every == 0 {
            target = learner.params.clone();
        }
    }
    Ok(learner)
}

#[allow(clippy::too_many_arguments)]
fn rollout_vs_partner(
    game: &MiniHanabi,
    learner: &BestResponse,
    partner: &dyn Policy,
    seat: usize,
    eps: f64,
    seed: u64,
    episode: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LearnerTrace> {
    let idx = BestResponse::idx(&learner.params, learner.belief.is_some());
    let game_seed = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(episode as u64);
    let mut state = game.new_game(game_seed);
    let mut h = vec![0.0; learner.config.hidden];
    let mut history = learner.belief.as_ref().map(|_| Trajectory {
        agent: seat,
        steps: Vec::new(),
        terminal: false,
        rewards: Vec::new(),
    });
    let mut trace = LearnerTrace {
        inputs: Vec::new(),
        decisions: Vec::new(),
        returns_between: Vec::new(),
    };
    let mut partner_ctx = partner.begin_episode();

    let consume = |learner: &BestResponse,
                       h: &mut Vec<f64>,
                       history: &mut Option<Trajectory>,
                       trace: &mut LearnerTrace,
                       obs: &ObservationFeatures|
     -> Result<()> {
        let aux = match history {
            None => None,
            Some(hist) => {
                hist.steps.push(TrajStep {
                    obs: obs.clone(),
                    actor: None,
                    action: None,
                    own_reveal: None,
                });
                learner.summary_of(hist)?
            }
        };
        let active = learner.input_indices(obs, None);
        *h = BestResponse::gru_step_raw(&learner.params, &idx, &active, aux.as_deref(), h);
        trace.inputs.push((active, aux));
        Ok(())
    };

    consume(learner, &mut h, &mut history, &mut trace, &game.observe(&state, seat))?;
    partner.observe(&mut partner_ctx, &game.observe(&state, 1 - seat))?;

    let mut accrued = 0.0f64;
    let mut has_decided = false;
    while !game.is_terminal(&state) {
        let actor = game.current_player(&state);
        let legal = game.legal_actions(&state)?;
        let action = if actor == seat {
            let q = BestResponse::q_values_raw(&learner.params, &idx, &h);
            if q.iter().any(|v| !v.is_finite()) {
                return Err(CoordError::Contract(format!(
                    "non-finite Q at episode {episode}"
                )));
            }
            let greedy = BestResponse::greedy_over(&q, &legal);
            let action = if rng.gen::<f64>() < eps {
                legal[rng.gen_range(0..legal.len())]
            } else {
                greedy
            };
            if has_decided {
                trace.returns_between.push(accrued);
            }
            accrued = 0.0;
            has_decided = true;
            trace
                .decisions
                .push((trace.inputs.len() - 1, action, legal.clone()));
            action
        } else {
            let probs = partner.action_probs(&partner_ctx, &legal)?;
            let mut u = rng.gen::<f64>() * probs.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            let mut chosen = *legal.last().unwrap();
            for &a in &legal {
                u -= probs[a];
                if u <= 0.0 {
                    chosen = a;
                    break;
                }
            }
            chosen
        };
        let out = game.step(&state, action)?;
        accrued += out.reward;
        consume(learner, &mut h, &mut history, &mut trace, &game.observe(&out.state, seat))?;
        partner.observe(&mut partner_ctx, &game.observe(&out.state, 1 - seat))?;
        state = out.state;
    }
    if has_decided {
        trace.returns_between.push(accrued);
    }
    Ok(trace)
}

fn learner_gradients(
    learner: &BestResponse,
    target: &ParamSet,
    trace: &LearnerTrace,
) -> Result<Vec<Tensor>> {
    let cfg = &learner.config;
    let idx = BestResponse::idx(&learner.params, learner.belief.is_some());
    let mut grads = learner.params.zero_grads();
    if trace.decisions.is_empty() {
        return Ok(grads);
    }

    // bootstrap targets under the frozen target network
    let mut th = vec![0.0; cfg.hidden];
    let mut target_q: Vec<Vec<f64>> = Vec::new();
    let mut next_decision = 0usize;
    for (t, (active, aux)) in trace.inputs.iter().enumerate() {
        th = BestResponse::gru_step_raw(target, &idx, active, aux.as_deref(), &th);
        while next_decision < trace.decisions.len() && trace.decisions[next_decision].0 == t {
            target_q.push(BestResponse::q_values_raw(target, &idx, &th));
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
                let q = &target_q[horizon];
                let legal = &trace.decisions[horizon].2;
                y += disc * legal.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max);
            }
            y
        })
        .collect();

    let mut tape = Tape::new();
    let p_ids: Vec<VarId> = (0..learner.params.len())
        .map(|i| tape.param(&learner.params, i))
        .collect();
    let hd = cfg.hidden;
    let mut hv = tape.leaf(Tensor::zeros(&[1, hd]));
    let mut sq_terms: Vec<VarId> = Vec::new();
    let mut next_decision = 0usize;
    for (t, (active, aux)) in trace.inputs.iter().enumerate() {
        hv = gru_step_tape(&mut tape, &p_ids, &idx, active, aux.as_deref(), hv)?;
        while next_decision < trace.decisions.len() && trace.decisions[next_decision].0 == t {
            let (_, action, _) = &trace.decisions[next_decision];
            let wq = tape.matmul(hv, p_ids[idx.gru[9]])?;
            let q = tape.add_bias(wq, p_ids[idx.gru[10]]);
            let sel = tape.slice_cols(q, *action, 1);
            let y = tape.leaf(Tensor::new(vec![1, 1], vec![targets[next_decision]]));
            let diff = tape.sub(sel, y);
            sq_terms.push(tape.mul(diff, diff));
            next_decision += 1;
        }
    }
    if sq_terms.is_empty() {
        return Ok(grads);
    }
    let all = tape.concat_cols(&sq_terms);
    let sum = tape.sum(all);
    let loss = tape.scale(sum, 1.0 / sq_terms.len() as f64);
    let g = tape
        .backward(loss)
        .map_err(|e| CoordError::Contract(format!("backward failed: {e}")))?;
    tape.accumulate_param_grads(&g, &mut grads);
    Ok(grads)
}

fn gru_step_tape(
    tape: &mut Tape,
    p_ids: &[VarId],
    idx: &Idx,
    active: &[usize],
    aux: Option<&[f64]>,
    h: VarId,
) -> Result<VarId> {
    let ones = tape.leaf(Tensor::full(&[1, active.len()], 1.0));
    let aux_leaf = aux.map(|a| tape.leaf(Tensor::new(vec![1, a.len()], a.to_vec())));
    let pre = |tape: &mut Tape, gate: usize, hvar: VarId| -> Result<VarId> {
        let rows = tape
            .gather(p_ids[idx.gru[gate * 3]], active.to_vec())
            .map_err(|e| CoordError::Contract(format!("{e}")))?;
        let x = tape
            .matmul(ones, rows)
            .map_err(|e| CoordError::Contract(format!("{e}")))?;
        let hpart = tape
            .matmul(hvar, p_ids[idx.gru[gate * 3 + 1]])
            .map_err(|e| CoordError::Contract(format!("{e}")))?;
        let mut s = tape.add(x, hpart);
        if let (Some(al), Some(ai)) = (aux_leaf, idx.aux.as_ref()) {
            let apart = tape
                .matmul(al, p_ids[ai[gate]])
                .map_err(|e| CoordError::Contract(format!("{e}")))?;
            s = tape.add(s, apart);
        }
        Ok(tape.add_bias(s, p_ids[idx.gru[gate * 3 + 2]]))
    };
    let z = {
        let s = pre(tape, 0, h)?;
        tape.sigmoid(s)
    };
    let r = {
        let s = pre(tape, 1, h)?;
        tape.sigmoid(s)
    };
    let rh = tape.mul(r, h);
    let c = {
        let s = pre(tape, 2, rh)?;
        tape.tanh(s)
    };
    let neg_z = tape.scale(z, -1.0);
    let omz = tape.add_scalar(neg_z, 1.0);
    let a = tape.mul(omz, c);
    let b = tape.mul(z, h);
    Ok(tape.add(a, b))
}
