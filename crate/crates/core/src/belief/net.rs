//! The learned autoregressive belief: a feature-embedding front end (one
//! embedding row per feature value, Sigma d_k rows total), fully-connected
//! aggregation to one d-wide token per timestep, and an encoder-decoder
//! attention model that emits per-slot identity distributions
//! psi(c_h | c_<h, tau) under strict causal slot masking. A GRU
//! encoder-decoder baseline with the same front end is included for
//! architecture comparisons.

use super::{BeliefError, Result};
use crate::env::{FeatureSchema, GroundedConstraints, HiddenFeatures, Trajectory};
use crate::tensor::{Checkpoint, ParamSet, Tape, Tensor, VarId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Additive mask value; exactly zero attention weight after the
/// max-subtracted softmax.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmbedderConfig {
    pub d: usize,
    pub d_feature: usize,
    /// Maximum encoder positions (game turns + 1 initial observation).
    pub t_max: usize,
    pub cardinalities: Vec<usize>,
    pub feature_names: Vec<String>,
    pub hidden_slots: usize,
    pub num_identities: usize,
    pub dropout: f64,
    pub layers: usize,
    pub heads: usize,
    pub feedforward: usize,
}

impl EmbedderConfig {
    pub fn from_game<G: crate::env::Game>(
        game: &G,
        layers: usize,
        heads: usize,
        d: usize,
        d_feature: usize,
        feedforward: usize,
        dropout: f64,
    ) -> Self {
        let schema: &FeatureSchema = game.feature_schema();
        EmbedderConfig {
            d,
            d_feature,
            t_max: game.max_turns() + 1,
            cardinalities: schema.cardinalities.clone(),
            feature_names: schema.names.clone(),
            hidden_slots: game.hidden_slots(),
            num_identities: game.num_identities(),
            dropout,
            layers,
            heads,
            feedforward,
        }
    }

    /// One embedding row per feature value: Sigma d_k, not Pi d_k.
    pub fn vocab_size(&self) -> usize {
        self.cardinalities.iter().sum()
    }

    pub fn num_features(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(BeliefError::Contract(format!(
                "model width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.cardinalities.is_empty() || self.hidden_slots == 0 || self.num_identities == 0 {
            return Err(BeliefError::Contract("degenerate embedder config".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

/// One recorded attention-probability matrix (rows sum to 1; padding
/// columns carry exactly zero weight).
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub kind: AttnKind,
    pub layer: usize,
    pub head: usize,
    pub probs: Tensor,
}

pub struct ForwardArtifacts {
    /// H x C slot logits.
    pub logits: VarId,
    /// Last-position encoder output, the belief "hidden state" handed to
    /// best-response policies ([1, d]; zeros for an empty history).
    pub summary: Tensor,
    pub attention: Vec<AttnRecord>,
    pub valid_len: usize,
}

#[derive(Clone)]
pub struct BeliefNet {
    pub config: EmbedderConfig,
    pub params: ParamSet,
    pub seed: u64,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

impl BeliefNet {
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let mut params = ParamSet::new();
        let (d, df, ff) = (config.d, config.d_feature, config.feedforward);
        let k = config.num_features();
        let c = config.num_identities;
        params.add(
            "embed_feat",
            uniform_init(&mut rng, &[config.vocab_size(), df], df),
        );
        params.add("agg_w", uniform_init(&mut rng, &[k * df, d], k * df));
        params.add("agg_b", Tensor::zeros(&[d]));
        params.add("pos", uniform_init(&mut rng, &[config.t_max, d], d));
        params.add("ln_in_g", Tensor::full(&[d], 1.0));
        params.add("ln_in_b", Tensor::zeros(&[d]));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.add(&format!("enc{l}_{w}"), uniform_init(&mut rng, &[d, d], d));
            }
            params.add(&format!("enc{l}_ln1_g"), Tensor::full(&[d], 1.0));
            params.add(&format!("enc{l}_ln1_b"), Tensor::zeros(&[d]));
            params.add(&format!("enc{l}_ff1_w"), uniform_init(&mut rng, &[d, ff], d));
            params.add(&format!("enc{l}_ff1_b"), Tensor::zeros(&[ff]));
            params.add(&format!("enc{l}_ff2_w"), uniform_init(&mut rng, &[ff, d], ff));
            params.add(&format!("enc{l}_ff2_b"), Tensor::zeros(&[d]));
            params.add(&format!("enc{l}_ln2_g"), Tensor::full(&[d], 1.0));
            params.add(&format!("enc{l}_ln2_b"), Tensor::zeros(&[d]));
        }
        // decoder slot-embedding table: row 0 is the begin-of-hand token
        params.add("embed_slot", uniform_init(&mut rng, &[c + 1, d], d));
        params.add("dec_pos", uniform_init(&mut rng, &[config.hidden_slots, d], d));
        params.add("dec_ln_in_g", Tensor::full(&[d], 1.0));
        params.add("dec_ln_in_b", Tensor::zeros(&[d]));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo", "cq", "ck", "cv", "co"] {
                params.add(&format!("dec{l}_{w}"), uniform_init(&mut rng, &[d, d], d));
            }
            for ln in ["ln1", "ln2", "ln3"] {
                params.add(&format!("dec{l}_{ln}_g"), Tensor::full(&[d], 1.0));
                params.add(&format!("dec{l}_{ln}_b"), Tensor::zeros(&[d]));
            }
            params.add(&format!("dec{l}_ff1_w"), uniform_init(&mut rng, &[d, ff], d));
            params.add(&format!("dec{l}_ff1_b"), Tensor::zeros(&[ff]));
            params.add(&format!("dec{l}_ff2_w"), uniform_init(&mut rng, &[ff, d], ff));
            params.add(&format!("dec{l}_ff2_b"), Tensor::zeros(&[d]));
        }
        // zero-initialized head: the untrained model is exactly uniform
        params.add("out_w", Tensor::zeros(&[d, c]));
        params.add("out_b", Tensor::zeros(&[c]));
        Ok(BeliefNet {
            config,
            params,
            seed,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn p(&self, tape: &mut Tape, name: &str) -> VarId {
        let idx = self.params.index_of(name).expect("known parameter");
        tape.param(&self.params, idx)
    }

    /// Encoder token indices, validating each feature value against its
    /// declared cardinality.
    fn encoder_indices(&self, traj: &Trajectory) -> Result<Vec<usize>> {
        let cfg = &self.config;
        let mut idx = Vec::with_capacity(traj.steps.len() * cfg.num_features());
        for step in &traj.steps {
            if step.obs.values.len() != cfg.num_features() {
                return Err(BeliefError::Contract(format!(
                    "observation has {} features, embedder expects {}",
                    step.obs.values.len(),
                    cfg.num_features()
                )));
            }
            let mut offset = 0;
            for (k, (&v, &card)) in step
                .obs
                .values
                .iter()
                .zip(cfg.cardinalities.iter())
                .enumerate()
            {
                if v as usize >= card {
                    return Err(BeliefError::Contract(format!(
                        "feature {} ({}) value {} out of vocabulary (cardinality {})",
                        k, cfg.feature_names[k], v, card
                    )));
                }
                idx.push(offset + v as usize);
                offset += card;
            }
        }
        Ok(idx)
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: VarId,
        mode: NetMode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> VarId {
        let p = self.config.dropout;
        if mode == NetMode::Eval || p == 0.0 {
            return x;
        }
        let rng = rng.as_mut().expect("train mode requires an rng");
        let shape = tape.value(x).shape.clone();
        let keep = 1.0 - p;
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.leaf(Tensor::new(shape, mask));
        tape.mul(x, m)
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        tape: &mut Tape,
        x_q: VarId,
        x_kv: VarId,
        prefix: &str,
        names: [&str; 4],
        mask: &Tensor,
        kind: AttnKind,
        layer: usize,
        attention: &mut Vec<AttnRecord>,
    ) -> Result<VarId> {
        let heads = self.config.heads;
        let dh = self.config.d / heads;
        let wq = self.p(tape, &format!("{prefix}_{}", names[0]));
        let wk = self.p(tape, &format!("{prefix}_{}", names[1]));
        let wv = self.p(tape, &format!("{prefix}_{}", names[2]));
        let wo = self.p(tape, &format!("{prefix}_{}", names[3]));
        let q = tape.matmul(x_q, wq)?;
        let k = tape.matmul(x_kv, wk)?;
        let v = tape.matmul(x_kv, wv)?;
        let mask_id = tape.leaf(mask.clone());
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = tape.add(scaled, mask_id);
            let probs = tape.softmax(masked)?;
            attention.push(AttnRecord {
                kind,
                layer,
                head: h,
                probs: tape.value(probs).clone(),
            });
            head_outs.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&head_outs);
        Ok(tape.matmul(ctx, wo)?)
    }

    fn post_ln(
        &self,
        tape: &mut Tape,
        x: VarId,
        sub: VarId,
        g_name: &str,
        b_name: &str,
        mode: NetMode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> VarId {
        let dropped = self.dropout(tape, sub, mode, rng);
        let s = tape.add(x, dropped);
        let g = self.p(tape, g_name);
        let b = self.p(tape, b_name);
        tape.layer_norm(s, g, b)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        x: VarId,
        prefix: &str,
    ) -> Result<VarId> {
        let w1 = self.p(tape, &format!("{prefix}_ff1_w"));
        let b1 = self.p(tape, &format!("{prefix}_ff1_b"));
        let w2 = self.p(tape, &format!("{prefix}_ff2_w"));
        let b2 = self.p(tape, &format!("{prefix}_ff2_b"));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        Ok(tape.add_bias(o, b2))
    }

    /// Feature embedding + aggregation + positional embedding + layer norm:
    /// `pad_to` total positions of width d (T x d, never KT x d).
    pub fn embed_encoder(
        &self,
        tape: &mut Tape,
        traj: &Trajectory,
        pad_to: usize,
        mode: NetMode,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(VarId, usize)> {
        let cfg = &self.config;
        let t = traj.steps.len();
        if t > cfg.t_max {
            return Err(BeliefError::Contract(format!(
                "trajectory length {t} exceeds maximum {}",
                cfg.t_max
            )));
        }
        let p_len = pad_to.max(t).max(1);
        if p_len > cfg.t_max {
            return Err(BeliefError::Contract(format!(
                "padded length {p_len} exceeds maximum {}",
                cfg.t_max
            )));
        }
        let k = cfg.num_features();
        let mut idx = self.encoder_indices(traj)?;
        idx.resize(p_len * k, 0); // padding rows read token 0; masked downstream
        let embed = self.p(tape, "embed_feat");
        let rows = tape.gather(embed, idx)?;
        let per_step = tape.reshape(rows, vec![p_len, k * cfg.d_feature]);
        let agg_w = self.p(tape, "agg_w");
        let agg_b = self.p(tape, "agg_b");
        let agg = tape.matmul(per_step, agg_w)?;
        let agg = tape.add_bias(agg, agg_b);
        let pos_table = self.p(tape, "pos");
        let pos = tape.gather(pos_table, (0..p_len).collect())?;
        let x = tape.add(agg, pos);
        let g = self.p(tape, "ln_in_g");
        let b = self.p(tape, "ln_in_b");
        let x = tape.layer_norm(x, g, b);
        Ok((self.dropout(tape, x, mode, rng), t))
    }

    /// Full teacher-forced forward pass: H x C logits whose slot-h row
    /// depends only on the encoder input and teacher slots < h.
    pub fn forward(
        &self,
        tape: &mut Tape,
        traj: &Trajectory,
        teacher: &HiddenFeatures,
        mode: NetMode,
        pad_to: Option<usize>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardArtifacts> {
        let cfg = &self.config;
        let hsl = cfg.hidden_slots;
        if teacher.slots.len() != hsl || teacher.occupied.len() != hsl {
            return Err(BeliefError::Contract(format!(
                "teacher has {} slots, model expects {hsl}",
                teacher.slots.len()
            )));
        }
        let mut attention = Vec::new();
        let (mut enc, valid) =
            self.embed_encoder(tape, traj, pad_to.unwrap_or(0), mode, &mut rng)?;
        let p_len = tape.value(enc).shape[0];

        // padding columns get -1e30 in every attention row
        let mut enc_mask = Tensor::zeros(&[p_len, p_len]);
        for i in 0..p_len {
            for j in valid..p_len {
                enc_mask.data[i * p_len + j] = MASK_NEG;
            }
        }
        for l in 0..cfg.layers {
            let prefix = format!("enc{l}");
            let sa = self.mha(
                tape,
                enc,
                enc,
                &prefix,
                ["wq", "wk", "wv", "wo"],
                &enc_mask,
                AttnKind::EncoderSelf,
                l,
                &mut attention,
            )?;
            enc = self.post_ln(
                tape,
                enc,
                sa,
                &format!("{prefix}_ln1_g"),
                &format!("{prefix}_ln1_b"),
                mode,
                &mut rng,
            );
            let ff = self.feed_forward(tape, enc, &prefix)?;
            enc = self.post_ln(
                tape,
                enc,
                ff,
                &format!("{prefix}_ln2_g"),
                &format!("{prefix}_ln2_b"),
                mode,
                &mut rng,
            );
        }
        let summary = if valid > 0 {
            let enc_v = tape.value(enc);
            let d = cfg.d;
            Tensor::new(
                vec![1, d],
                enc_v.data[(valid - 1) * d..valid * d].to_vec(),
            )
        } else {
            Tensor::zeros(&[1, cfg.d])
        };

        // teacher-forced decoder input: begin-of-hand, then shifted slots
        let mut dec_idx = Vec::with_capacity(hsl);
        dec_idx.push(0usize);
        for h in 0..hsl.saturating_sub(1) {
            if teacher.occupied[h] {
                if teacher.slots[h] >= cfg.num_identities {
                    return Err(BeliefError::Contract(format!(
                        "teacher identity {} out of range {}",
                        teacher.slots[h], cfg.num_identities
                    )));
                }
                dec_idx.push(teacher.slots[h] + 1);
            } else {
                dec_idx.push(0);
            }
        }
        let slot_table = self.p(tape, "embed_slot");
        let mut dec = tape.gather(slot_table, dec_idx)?;
        let dec_pos_table = self.p(tape, "dec_pos");
        let dec_pos = tape.gather(dec_pos_table, (0..hsl).collect())?;
        dec = tape.add(dec, dec_pos);
        let g = self.p(tape, "dec_ln_in_g");
        let b = self.p(tape, "dec_ln_in_b");
        dec = tape.layer_norm(dec, g, b);
        dec = self.dropout(tape, dec, mode, &mut rng);

        // strict causal mask: slot h attends to slots <= h of the shifted
        // input, i.e. only teacher slots < h
        let mut causal = Tensor::zeros(&[hsl, hsl]);
        for i in 0..hsl {
            for j in (i + 1)..hsl {
                causal.data[i * hsl + j] = MASK_NEG;
            }
        }
        let mut cross_mask = Tensor::zeros(&[hsl, p_len]);
        for i in 0..hsl {
            for j in valid..p_len {
                cross_mask.data[i * p_len + j] = MASK_NEG;
            }
        }
        for l in 0..cfg.layers {
            let prefix = format!("dec{l}");
            let sa = self.mha(
                tape,
                dec,
                dec,
                &prefix,
                ["wq", "wk", "wv", "wo"],
                &causal,
                AttnKind::DecoderSelf,
                l,
                &mut attention,
            )?;
            dec = self.post_ln(
                tape,
                dec,
                sa,
                &format!("{prefix}_ln1_g"),
                &format!("{prefix}_ln1_b"),
                mode,
                &mut rng,
            );
            // an empty history offers nothing to attend to: the decoder
            // must still produce the prior, so cross-attention contributes
            // zero instead of attending to padding
            let ca = if valid > 0 {
                self.mha(
                    tape,
                    dec,
                    enc,
                    &prefix,
                    ["cq", "ck", "cv", "co"],
                    &cross_mask,
                    AttnKind::Cross,
                    l,
                    &mut attention,
                )?
            } else {
                tape.leaf(Tensor::zeros(&[hsl, cfg.d]))
            };
            dec = self.post_ln(
                tape,
                dec,
                ca,
                &format!("{prefix}_ln2_g"),
                &format!("{prefix}_ln2_b"),
                mode,
                &mut rng,
            );
            let ff = self.feed_forward(tape, dec, &prefix)?;
            dec = self.post_ln(
                tape,
                dec,
                ff,
                &format!("{prefix}_ln3_g"),
                &format!("{prefix}_ln3_b"),
                mode,
                &mut rng,
            );
        }
        let out_w = self.p(tape, "out_w");
        let out_b = self.p(tape, "out_b");
        let logits = tape.matmul(dec, out_w)?;
        let logits = tape.add_bias(logits, out_b);
        Ok(ForwardArtifacts {
            logits,
            summary,
            attention,
            valid_len: valid,
        })
    }

    /// Mean over occupied slots of -log psi(true identity); evaluation
    /// mode, fresh tape.
    pub fn nll(&self, traj: &Trajectory, truth: &HiddenFeatures) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, traj, truth, NetMode::Eval, None, None)?;
        let ce = tape.cross_entropy(out.logits, &truth.slots, &truth.occupied)?;
        Ok(tape.value(ce).data[0])
    }

    /// Per-slot probability rows (H x C, each row normalized) under
    /// teacher forcing with `truth`.
    pub fn slot_probs(&self, traj: &Trajectory, truth: &HiddenFeatures) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, traj, truth, NetMode::Eval, None, None)?;
        let probs = tape.softmax(out.logits)?;
        let v = tape.value(probs);
        let c = self.config.num_identities;
        Ok(v.data.chunks(c).map(|r| r.to_vec()).collect())
    }

    /// Encoder summary vector for the latest real timestep ([1, d]).
    pub fn encode_summary(&self, traj: &Trajectory) -> Result<Tensor> {
        let mut tape = Tape::new();
        let teacher = HiddenFeatures {
            slots: vec![0; self.config.hidden_slots],
            occupied: vec![false; self.config.hidden_slots],
        };
        let out = self.forward(&mut tape, traj, &teacher, NetMode::Eval, None, None)?;
        Ok(out.summary)
    }

    /// Ancestral sampling slot by slot. With grounded constraints: whole-
    /// hand rejection for up to `max_retries` attempts, then an exact
    /// sample from the grounded belief so a consistent hand is guaranteed.
    pub fn sample_hand(
        &self,
        traj: &Trajectory,
        seed: u64,
        grounded: Option<&GroundedConstraints>,
        max_retries: usize,
    ) -> Result<HiddenFeatures> {
        let hsl = self.config.hidden_slots;
        let c = self.config.num_identities;
        let occupied: Vec<bool> = grounded
            .map(|g| g.occupied.clone())
            .unwrap_or_else(|| vec![true; hsl]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d));
        let attempts = if grounded.is_some() { max_retries.max(1) } else { 1 };
        for _ in 0..attempts {
            let mut hand = HiddenFeatures {
                slots: vec![0; hsl],
                occupied: occupied.clone(),
            };
            let mut partial = HiddenFeatures {
                slots: vec![0; hsl],
                occupied: vec![false; hsl],
            };
            for h in 0..hsl {
                if !occupied[h] {
                    continue;
                }
                let rows = self.slot_probs(traj, &partial)?;
                let row = &rows[h];
                let mut u = rng.gen::<f64>();
                let mut pick = c - 1;
                for (i, &p) in row.iter().enumerate() {
                    u -= p;
                    if u <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                hand.slots[h] = pick;
                partial.slots[h] = pick;
                partial.occupied[h] = true;
            }
            match grounded {
                Some(g) => {
                    if g.admits(&hand) {
                        return Ok(hand);
                    }
                }
                None => return Ok(hand),
            }
        }
        // fallback: exact weighted draw from the grounded belief
        let g = grounded.expect("fallback only runs under constraints");
        let cands = g.enumerate();
        let total: f64 = cands.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(BeliefError::Inconsistent(
                "grounded constraints admit no hand".into(),
            ));
        }
        let mut u = rng.gen::<f64>() * total;
        for (hand, w) in &cands {
            u -= w;
            if u <= 0.0 {
                return Ok(hand.clone());
            }
        }
        Ok(cands.last().unwrap().0.clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(
            self.config.digest(),
            serde_json::to_string(&self.config).unwrap(),
            &self.params,
        )
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config: EmbedderConfig = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| BeliefError::Contract(format!("bad checkpoint metadata: {e}")))?;
        config.validate()?;
        let params = ckpt.into_params();
        Ok(BeliefNet {
            config,
            params,
            seed: 0,
        })
    }
}

/// GRU encoder-decoder baseline sharing the attention model's embedding
/// front end (feature table + aggregation); hidden width is chosen to
/// match the attention model's parameter count.
pub struct RecurrentBelief {
    pub config: EmbedderConfig,
    pub hidden: usize,
    pub params: ParamSet,
}

impl RecurrentBelief {
    pub fn new(config: EmbedderConfig, hidden: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd6e8feb86659fd93));
        let mut params = ParamSet::new();
        let (d, df, hd) = (config.d, config.d_feature, hidden);
        let k = config.num_features();
        let c = config.num_identities;
        params.add(
            "embed_feat",
            uniform_init(&mut rng, &[config.vocab_size(), df], df),
        );
        params.add("agg_w", uniform_init(&mut rng, &[k * df, d], k * df));
        params.add("agg_b", Tensor::zeros(&[d]));
        for side in ["enc", "dec"] {
            for gate in ["z", "r", "c"] {
                params.add(
                    &format!("{side}_wx{gate}"),
                    uniform_init(&mut rng, &[d, hd], d),
                );
                params.add(
                    &format!("{side}_wh{gate}"),
                    uniform_init(&mut rng, &[hd, hd], hd),
                );
                params.add(&format!("{side}_b{gate}"), Tensor::zeros(&[hd]));
            }
        }
        params.add("embed_slot", uniform_init(&mut rng, &[c + 1, d], d));
        params.add("out_w", Tensor::zeros(&[hd, c]));
        params.add("out_b", Tensor::zeros(&[c]));
        Ok(RecurrentBelief {
            config,
            hidden,
            params,
        })
    }

    /// Hidden width whose parameter count is closest to the attention
    /// model's for the same embedder config.
    pub fn matched_hidden(config: &EmbedderConfig) -> Result<usize> {
        let target = BeliefNet::new(config.clone(), 0)?.num_params();
        let mut best = (usize::MAX, 1usize);
        for hd in 1..4096 {
            let n = Self::param_count(config, hd);
            let gap = n.abs_diff(target);
            if gap < best.0 {
                best = (gap, hd);
            }
            if n > 2 * target {
                break;
            }
        }
        Ok(best.1)
    }

    fn param_count(config: &EmbedderConfig, hd: usize) -> usize {
        let (d, df) = (config.d, config.d_feature);
        let k = config.num_features();
        let c = config.num_identities;
        config.vocab_size() * df
            + k * df * d
            + d
            + 2 * 3 * (d * hd + hd * hd + hd)
            + (c + 1) * d
            + hd * c
            + c
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn p(&self, tape: &mut Tape, name: &str) -> VarId {
        let idx = self.params.index_of(name).expect("known parameter");
        tape.param(&self.params, idx)
    }

    fn gru_cell(
        &self,
        tape: &mut Tape,
        side: &str,
        x: VarId,
        h: VarId,
    ) -> Result<VarId> {
        let gate = |tape: &mut Tape, g: &str, x: VarId, h: VarId, this: &Self| -> Result<VarId> {
            let wx = this.p(tape, &format!("{side}_wx{g}"));
            let wh = this.p(tape, &format!("{side}_wh{g}"));
            let b = this.p(tape, &format!("{side}_b{g}"));
            let a = tape.matmul(x, wx)?;
            let c = tape.matmul(h, wh)?;
            let s = tape.add(a, c);
            Ok(tape.add_bias(s, b))
        };
        let z = {
            let s = gate(tape, "z", x, h, self)?;
            tape.sigmoid(s)
        };
        let r = {
            let s = gate(tape, "r", x, h, self)?;
            tape.sigmoid(s)
        };
        let rh = tape.mul(r, h);
        let c = {
            let wx = self.p(tape, &format!("{side}_wxc"));
            let wh = self.p(tape, &format!("{side}_whc"));
            let b = self.p(tape, &format!("{side}_bc"));
            let a = tape.matmul(x, wx)?;
            let hh = tape.matmul(rh, wh)?;
            let s = tape.add(a, hh);
            let s = tape.add_bias(s, b);
            tape.tanh(s)
        };
        let neg_z = tape.scale(z, -1.0);
        let omz = tape.add_scalar(neg_z, 1.0);
        let a = tape.mul(omz, c);
        let bpart = tape.mul(z, h);
        Ok(tape.add(a, bpart))
    }

    /// Teacher-forced logits (H x C): GRU encoder over the embedded
    /// history, GRU decoder over shifted slot tokens.
    pub fn forward(
        &self,
        tape: &mut Tape,
        traj: &Trajectory,
        teacher: &HiddenFeatures,
    ) -> Result<VarId> {
        let cfg = &self.config;
        let k = cfg.num_features();
        let hsl = cfg.hidden_slots;
        // shared front end: per-timestep aggregated feature embeddings
        let net_view = BeliefNet {
            config: cfg.clone(),
            params: ParamSet::new(),
            seed: 0,
        };
        let idx = net_view.encoder_indices(traj)?;
        let t = traj.steps.len();
        let embed = self.p(tape, "embed_feat");
        let rows = tape.gather(embed, idx)?;
        let per_step = tape.reshape(rows, vec![t, k * cfg.d_feature]);
        let agg_w = self.p(tape, "agg_w");
        let agg_b = self.p(tape, "agg_b");
        let agg = tape.matmul(per_step, agg_w)?;
        let agg = tape.add_bias(agg, agg_b);

        let flat = tape.reshape(agg, vec![1, t * cfg.d]);
        let mut h = tape.leaf(Tensor::zeros(&[1, self.hidden]));
        for i in 0..t {
            let xi = tape.slice_cols(flat, i * cfg.d, cfg.d);
            h = self.gru_cell(tape, "enc", xi, h)?;
        }

        let slot_table = self.p(tape, "embed_slot");
        let out_w = self.p(tape, "out_w");
        let out_b = self.p(tape, "out_b");
        let mut logits_rows = Vec::with_capacity(hsl);
        let mut dh = h;
        for s in 0..hsl {
            let tok = if s == 0 {
                0
            } else if teacher.occupied[s - 1] {
                teacher.slots[s - 1] + 1
            } else {
                0
            };
            let x = tape.gather(slot_table, vec![tok])?;
            dh = self.gru_cell(tape, "dec", x, dh)?;
            let q = tape.matmul(dh, out_w)?;
            logits_rows.push(tape.add_bias(q, out_b));
        }
        // stack H rows of [1, C] into [H, C]
        let wide = tape.concat_cols(&logits_rows);
        Ok(tape.reshape(wide, vec![hsl, cfg.num_identities]))
    }

    pub fn nll(&self, traj: &Trajectory, truth: &HiddenFeatures) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, traj, truth)?;
        let ce = tape.cross_entropy(logits, &truth.slots, &truth.occupied)?;
        Ok(tape.value(ce).data[0])
    }
}
