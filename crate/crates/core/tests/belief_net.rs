//! Learned-belief architecture invariants: uniform output at init, strict
//! causal slot masking, padding invariance, attention normalization, and
//! an end-to-end finite-difference gradient check.

use gbc_core::belief::{
    train_belief, train_recurrent_baseline, AttnKind, BeliefNet, EmbedderConfig, NetMode,
    RecurrentBelief, TrainConfig, TrainMode,
};
use gbc_core::env::{Game, HiddenFeatures, MiniHanabi, Trajectory};
use gbc_core::policy::{run_episode, scripted_pool, ActMode, ScriptedConvention};
use gbc_core::tensor::{load_checkpoint, save_checkpoint, Tape};
use gbc_core::testutil::assert_grads_match;
use std::sync::Arc;

fn mini() -> Arc<MiniHanabi> {
    Arc::new(MiniHanabi::default_mini())
}

fn tiny_config(game: &MiniHanabi) -> EmbedderConfig {
    EmbedderConfig::from_game(game, 1, 2, 8, 4, 16, 0.0)
}

/// A real mid-game trajectory plus the true hand at that point.
fn sample_case(game: &Arc<MiniHanabi>, seed: u64, turns: usize) -> (Trajectory, HiddenFeatures) {
    let p = ScriptedConvention::new(game.clone(), 1);
    let ep = run_episode(game, [&p, &p], seed, ActMode::Greedy).unwrap();
    let t = turns.min(ep.trajectories[0].num_turns());
    (
        ep.trajectories[0].prefix(t),
        game.hidden_features(&ep.states[t], 0),
    )
}

#[test]
fn untrained_net_is_exactly_uniform() {
    let game = mini();
    let net = BeliefNet::new(tiny_config(&game), 3).unwrap();
    let c = game.num_identities() as f64;
    for seed in 0..5u64 {
        let (traj, hand) = sample_case(&game, seed, 4);
        if !hand.occupied.iter().any(|&o| o) {
            continue;
        }
        assert!((net.nll(&traj, &hand).unwrap() - c.ln()).abs() < 1e-9);
        for (s, row) in net.slot_probs(&traj, &hand).unwrap().iter().enumerate() {
            if hand.occupied[s] {
                for p in row {
                    assert!((p - 1.0 / c).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn encoder_is_t_by_d_with_sum_vocabulary() {
    let game = mini();
    let cfg = tiny_config(&game);
    let expected_vocab: usize = game.feature_schema().cardinalities.iter().sum();
    assert_eq!(cfg.vocab_size(), expected_vocab);
    let net = BeliefNet::new(cfg.clone(), 0).unwrap();
    let table = net.params.get(net.params.index_of("embed_feat").unwrap());
    assert_eq!(table.shape, vec![expected_vocab, cfg.d_feature]);

    let (traj, _) = sample_case(&game, 0, 5);
    let t = traj.steps.len();
    let mut tape = Tape::new();
    let (x, valid) = net
        .embed_encoder(&mut tape, &traj, 0, NetMode::Eval, &mut None)
        .unwrap();
    assert_eq!(valid, t);
    // one d-wide token per timestep: T x d, not (K*T) x d
    assert_eq!(tape.value(x).shape, vec![t, cfg.d]);
}

#[test]
fn padding_never_changes_logits() {
    let game = mini();
    let mut net = BeliefNet::new(tiny_config(&game), 7).unwrap();
    // perturb the zero head so logits are nontrivial
    let out_w = net.params.index_of("out_w").unwrap();
    for (i, v) in net.params.get_mut(out_w).data.iter_mut().enumerate() {
        *v = (i as f64 * 0.37).sin() * 0.5;
    }
    for seed in 0..5u64 {
        let (traj, hand) = sample_case(&game, seed, 6);
        let logits_of = |pad: Option<usize>| {
            let mut tape = Tape::new();
            let out = net
                .forward(&mut tape, &traj, &hand, NetMode::Eval, pad, None)
                .unwrap();
            tape.value(out.logits).data.clone()
        };
        let base = logits_of(None);
        for pad in [traj.steps.len() + 1, traj.steps.len() + 7] {
            let padded = logits_of(Some(pad));
            for (a, b) in base.iter().zip(padded.iter()) {
                assert!((a - b).abs() < 1e-12, "seed {seed} pad {pad}");
            }
        }
    }
}

#[test]
fn causal_masking_blocks_all_leakage() {
    // changing teacher slot j must leave logits of every slot h <= j
    // bitwise unchanged; equality of outputs under input perturbation is
    // equivalent to an exactly-zero gradient path
    let game = mini();
    let mut net = BeliefNet::new(tiny_config(&game), 11).unwrap();
    let out_w = net.params.index_of("out_w").unwrap();
    for (i, v) in net.params.get_mut(out_w).data.iter_mut().enumerate() {
        *v = (i as f64 * 0.61).cos() * 0.5;
    }
    let hsl = game.hidden_slots();
    let c = game.num_identities();
    for seed in 0..5u64 {
        let (traj, hand) = sample_case(&game, seed, 5);
        if !hand.occupied.iter().all(|&o| o) {
            continue;
        }
        let logits_of = |teacher: &HiddenFeatures| {
            let mut tape = Tape::new();
            let out = net
                .forward(&mut tape, &traj, teacher, NetMode::Eval, None, None)
                .unwrap();
            tape.value(out.logits).data.clone()
        };
        let base = logits_of(&hand);
        for j in 0..hsl {
            let mut altered = hand.clone();
            altered.slots[j] = (altered.slots[j] + 1) % c;
            let changed = logits_of(&altered);
            for h in 0..=j {
                for k in 0..c {
                    assert_eq!(
                        base[h * c + k],
                        changed[h * c + k],
                        "seed {seed}: slot {j} leaked into logits of slot {h}"
                    );
                }
            }
        }
    }
}

#[test]
fn attention_rows_normalize_and_ignore_padding() {
    let game = mini();
    let net = BeliefNet::new(tiny_config(&game), 13).unwrap();
    let (traj, hand) = sample_case(&game, 2, 4);
    let pad = traj.steps.len() + 5;
    let mut tape = Tape::new();
    let out = net
        .forward(&mut tape, &traj, &hand, NetMode::Eval, Some(pad), None)
        .unwrap();
    assert!(!out.attention.is_empty());
    for rec in &out.attention {
        let (rows, cols) = (rec.probs.shape[0], rec.probs.shape[1]);
        for r in 0..rows {
            let row = &rec.probs.data[r * cols..(r + 1) * cols];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            if matches!(rec.kind, AttnKind::EncoderSelf | AttnKind::Cross) {
                for (j, &p) in row.iter().enumerate() {
                    if j >= out.valid_len {
                        assert_eq!(p, 0.0, "padding column {j} attended");
                    }
                }
            }
        }
    }
}

#[test]
fn empty_history_still_yields_a_distribution() {
    let game = mini();
    let net = BeliefNet::new(tiny_config(&game), 17).unwrap();
    let (traj, _) = sample_case(&game, 1, 3);
    let empty = Trajectory {
        agent: 0,
        steps: traj.steps[..1].to_vec(),
        terminal: false,
        rewards: vec![],
    };
    let hand = HiddenFeatures {
        slots: vec![0; game.hidden_slots()],
        occupied: vec![true; game.hidden_slots()],
    };
    let rows = net.slot_probs(&empty, &hand).unwrap();
    for row in rows {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let game = mini();
    let mut net = BeliefNet::new(tiny_config(&game), 19).unwrap();
    // move off the zero-head saddle so output-head gradients are nonzero
    let out_w = net.params.index_of("out_w").unwrap();
    for (i, v) in net.params.get_mut(out_w).data.iter_mut().enumerate() {
        *v = (i as f64 * 0.83).sin() * 0.3;
    }
    let (traj, hand) = sample_case(&game, 3, 6);
    assert!(hand.occupied.iter().any(|&o| o));

    let mut tape = Tape::new();
    let out = net
        .forward(&mut tape, &traj, &hand, NetMode::Eval, None, None)
        .unwrap();
    let ce = tape
        .cross_entropy(out.logits, &hand.slots, &hand.occupied)
        .unwrap();
    let grads_by_node = tape.backward(ce).unwrap();
    let mut grads = net.params.zero_grads();
    tape.accumulate_param_grads(&grads_by_node, &mut grads);

    let config = net.config.clone();
    let f = |params: &gbc_core::tensor::ParamSet| {
        let probe = BeliefNet {
            config: config.clone(),
            params: params.clone(),
            seed: 0,
        };
        probe.nll(&traj, &hand).unwrap()
    };
    // a spread of coordinates across every parameter role
    let mut coords = Vec::new();
    for name in [
        "embed_feat",
        "agg_w",
        "pos",
        "ln_in_g",
        "enc0_wq",
        "enc0_wv",
        "enc0_ff1_w",
        "enc0_ln2_b",
        "embed_slot",
        "dec_pos",
        "dec0_wq",
        "dec0_cq",
        "dec0_ck",
        "dec0_ff2_w",
        "out_w",
        "out_b",
    ] {
        let idx = net.params.index_of(name).unwrap();
        let n = net.params.get(idx).numel();
        coords.push((idx, 0));
        coords.push((idx, n / 2));
        coords.push((idx, n - 1));
    }
    assert_grads_match(&net.params, &grads, &coords, &f, 1e-3);
}

#[test]
fn sampled_hands_always_satisfy_grounded_constraints() {
    let game = mini();
    let net = BeliefNet::new(tiny_config(&game), 23).unwrap();
    for seed in 0..4u64 {
        let (traj, _) = sample_case(&game, seed, 6);
        let gc = game.grounded_constraints(&traj);
        if !gc.occupied.iter().any(|&o| o) {
            continue;
        }
        for draw in 0..50u64 {
            let hand = net.sample_hand(&traj, draw, Some(&gc), 64).unwrap();
            assert!(gc.admits(&hand), "seed {seed} draw {draw}");
        }
    }
}

#[test]
fn unconstrained_sampling_matches_the_uniform_model() {
    // the zero-initialized net is exactly uniform, so unconstrained slot
    // frequencies must match 1/C within binomial noise
    let game = mini();
    let net = BeliefNet::new(tiny_config(&game), 29).unwrap();
    let (traj, _) = sample_case(&game, 1, 3);
    let c = game.num_identities();
    let n = 3000usize;
    let mut counts = vec![0usize; c];
    for draw in 0..n {
        let hand = net.sample_hand(&traj, draw as u64, None, 1).unwrap();
        counts[hand.slots[0]] += 1;
    }
    let p = 1.0 / c as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    for &k in &counts {
        let freq = k as f64 / n as f64;
        assert!(
            (freq - p).abs() < 4.0 * sigma,
            "frequency {freq:.4} vs uniform {p:.4}"
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let game = mini();
    let mut net = BeliefNet::new(tiny_config(&game), 31).unwrap();
    let out_w = net.params.index_of("out_w").unwrap();
    for (i, v) in net.params.get_mut(out_w).data.iter_mut().enumerate() {
        *v = (i as f64 * 0.19).sin();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("belief.ckpt");
    save_checkpoint(&path, &net.to_checkpoint()).unwrap();
    let loaded = BeliefNet::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(loaded.config.d, net.config.d);
    for (name, t) in net.params.iter() {
        let l = loaded.params.get(loaded.params.index_of(name).unwrap());
        assert_eq!(t.data, l.data, "{name} not bit-exact");
    }
    for seed in 0..3u64 {
        let (traj, hand) = sample_case(&game, seed, 5);
        if hand.occupied.iter().any(|&o| o) {
            assert_eq!(
                net.nll(&traj, &hand).unwrap(),
                loaded.nll(&traj, &hand).unwrap()
            );
        }
    }
}

#[test]
fn recurrent_baseline_matches_parameter_budget() {
    let game = mini();
    let cfg = EmbedderConfig::from_game(game.as_ref(), 2, 4, 64, 32, 256, 0.1);
    let attn = BeliefNet::new(cfg.clone(), 0).unwrap();
    let hidden = RecurrentBelief::matched_hidden(&cfg).unwrap();
    let gru = RecurrentBelief::new(cfg, hidden, 0).unwrap();
    let ratio = gru.num_params() as f64 / attn.num_params() as f64;
    assert!(
        (0.8..=1.2).contains(&ratio),
        "baseline {} vs attention {} params (ratio {ratio:.3})",
        gru.num_params(),
        attn.num_params()
    );
}

#[test]
fn recurrent_baseline_is_uniform_at_init_and_differentiable() {
    let game = mini();
    let cfg = tiny_config(&game);
    let hidden = RecurrentBelief::matched_hidden(&cfg).unwrap();
    let net = RecurrentBelief::new(cfg, hidden, 1).unwrap();
    let (traj, hand) = sample_case(&game, 2, 4);
    if hand.occupied.iter().any(|&o| o) {
        let c = game.num_identities() as f64;
        assert!((net.nll(&traj, &hand).unwrap() - c.ln()).abs() < 1e-9);
    }
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, &traj, &hand).unwrap();
    let ce = tape
        .cross_entropy(logits, &hand.slots, &hand.occupied)
        .unwrap();
    let g = tape.backward(ce).unwrap();
    let mut grads = net.params.zero_grads();
    tape.accumulate_param_grads(&g, &mut grads);
    assert!(grads.iter().all(|t| t.all_finite()));
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        layers: 1,
        heads: 2,
        d: 16,
        d_feature: 8,
        feedforward: 32,
        batch: 8,
        dropout: 0.1,
        lr: 1e-3,
        warmup: 5,
        steps: 30,
        seed: 4,
        buffer_capacity: 500,
        prefill_games: 30,
        eval_games: 20,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_cross_entropy_below_uniform() {
    let game = mini();
    let pool = Arc::new(scripted_pool(game.clone(), 2, 0).unwrap());
    let (_, curve) = train_belief(pool, &small_train_config(), TrainMode::SingleThread).unwrap();
    assert!(!curve.is_empty());
    let uniform = (game.num_identities() as f64).ln();
    let last = curve.last().unwrap();
    assert!(last.train_ce.is_finite() && last.eval_ce.is_finite());
    assert!(
        last.eval_ce < uniform,
        "eval CE {:.4} not below uniform {uniform:.4}",
        last.eval_ce
    );
    // warmup schedule: recorded learning rates are positive and bounded
    for p in &curve {
        assert!(p.lr > 0.0 && p.lr <= 1e-3 + 1e-12);
    }
}

#[test]
fn threaded_training_matches_contract() {
    let game = mini();
    let pool = Arc::new(scripted_pool(game, 2, 1).unwrap());
    let config = TrainConfig {
        steps: 5,
        prefill_games: 10,
        ..small_train_config()
    };
    let (net, curve) = train_belief(pool, &config, TrainMode::Threaded { workers: 2 }).unwrap();
    assert!(net.params.num_scalars() > 0);
    assert!(curve.iter().all(|p| p.train_ce.is_finite()));
}

#[test]
fn baseline_training_runs() {
    let game = mini();
    let pool = Arc::new(scripted_pool(game, 2, 2).unwrap());
    let config = TrainConfig {
        steps: 10,
        ..small_train_config()
    };
    let (_, curve) = train_recurrent_baseline(pool, &config).unwrap();
    assert!(curve.iter().all(|p| p.eval_ce.is_finite()));
}
