//! Toolkit oracles: uniform-model cross-entropy baselines, PCA of planted
//! low-rank embeddings, CSV schema/precision guarantees, and manifest
//! reproducibility.

use gbc_core::belief::{BeliefNet, EmbedderConfig};
use gbc_core::env::{Game, GameConfig, MiniHanabi};
use gbc_core::policy::{scripted_pool, PolicyPool};
use gbc_core::toolkit::{
    attention_maps, embedding_pca, eval_ce_curve, narrow_down, score_histogram, semantic_ce,
    write_attention_csv, write_ce_curve_csv, write_manifest, write_pca_csv, write_xp_csv,
    ExactEvaluator, GroundedEvaluator, LearnedEvaluator, Manifest, XpRow,
};
use std::sync::Arc;

fn tiny_net(game: &MiniHanabi, seed: u64) -> BeliefNet {
    BeliefNet::new(
        EmbedderConfig::from_game(game, 1, 2, 8, 4, 16, 0.0),
        seed,
    )
    .unwrap()
}

#[test]
fn untrained_model_ce_is_log_c_and_narrow_down_recovers_c() {
    // zero-initialized output head => the model is exactly uniform, so its
    // cross-entropy is ln C at every timestep and the narrowing factor is
    // the full identity count, for both the 6- and 5-identity games
    for config in [GameConfig::default_mini(), GameConfig::five_identity()] {
        let game = Arc::new(MiniHanabi::new(config).unwrap());
        let c = game.config.num_identities() as f64;
        let pool = scripted_pool(game.clone(), 2, 0).unwrap();
        let net = Arc::new(tiny_net(game.as_ref(), 1));
        let curve = eval_ce_curve(&pool, &LearnedEvaluator(net), 6, 11).unwrap();
        assert!(!curve.is_empty());
        for point in &curve {
            assert!(
                (point.mean - c.ln()).abs() < 1e-9,
                "t={} mean={} ln C={}",
                point.timestep,
                point.mean,
                c.ln()
            );
            assert!(point.sem < 1e-9);
            assert!((narrow_down(point.mean) - c).abs() < 1e-7);
        }
    }
    assert_eq!(narrow_down(0.0), 1.0);
}

#[test]
fn exact_belief_never_loses_to_grounded_on_average() {
    let game = Arc::new(MiniHanabi::default_mini());
    let pool = scripted_pool(game, 3, 5).unwrap();
    let overall = |curve: &[gbc_core::toolkit::CePoint]| {
        let (sum, n) = curve.iter().fold((0.0, 0), |acc, p| {
            (acc.0 + p.mean * p.n_games as f64, acc.1 + p.n_games)
        });
        sum / n as f64
    };
    let grounded = overall(&eval_ce_curve(&pool, &GroundedEvaluator, 40, 3).unwrap());
    let exact = overall(&eval_ce_curve(&pool, &ExactEvaluator, 40, 3).unwrap());
    assert!(
        exact <= grounded + 1e-9,
        "exact {exact:.4} vs grounded {grounded:.4}"
    );
    assert!(grounded > 0.0);
}

#[test]
fn ce_curves_use_matched_game_counts_across_evaluators() {
    let game = Arc::new(MiniHanabi::default_mini());
    let pool = scripted_pool(game.clone(), 2, 1).unwrap();
    let a = eval_ce_curve(&pool, &GroundedEvaluator, 15, 7).unwrap();
    let net = Arc::new(tiny_net(game.as_ref(), 3));
    let b = eval_ce_curve(&pool, &LearnedEvaluator(net), 15, 7).unwrap();
    // same seed => same episodes => identical per-timestep sample counts
    assert_eq!(a.len(), b.len());
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(pa.timestep, pb.timestep);
        assert_eq!(pa.n_games, pb.n_games);
    }
}

#[test]
fn semantic_ce_of_uniform_model_matches_class_shares() {
    // a uniform model puts mass n_class / C on the true class, so the
    // semantic CE is bounded by the rarest class share and always finite
    let game = Arc::new(MiniHanabi::default_mini());
    let pool = scripted_pool(game.clone(), 2, 2).unwrap();
    let net = tiny_net(game.as_ref(), 4);
    let c = game.config.num_identities() as f64;
    let curve = semantic_ce(&pool, &net, 8, 13).unwrap();
    assert!(!curve.is_empty());
    for point in &curve {
        assert!(point.mean.is_finite() && point.mean >= 0.0);
        // worst case: the true class holds a single identity
        assert!(point.mean <= c.ln() + 1e-9);
    }
}

#[test]
fn pca_recovers_a_planted_rank_two_table() {
    let game = MiniHanabi::default_mini();
    let mut net = tiny_net(&game, 0);
    let idx = net.params.index_of("embed_feat").unwrap();
    let (rows, cols) = {
        let t = net.params.get(idx);
        (t.shape[0], t.shape[1])
    };
    // plant rows a_i * u + b_i * v with orthogonal u, v
    let mut u = vec![0.0; cols];
    let mut v = vec![0.0; cols];
    u[0] = 1.0;
    v[1] = 1.0;
    let coeffs: Vec<(f64, f64)> = (0..rows)
        .map(|r| ((r as f64 * 0.7).sin() * 3.0, (r as f64 * 1.3).cos() * 1.5))
        .collect();
    {
        let t = net.params.get_mut(idx);
        for r in 0..rows {
            for c in 0..cols {
                t.data[r * cols + c] = coeffs[r].0 * u[c] + coeffs[r].1 * v[c];
            }
        }
    }
    let report = embedding_pca(&net).unwrap();
    assert_eq!(report.points.len(), rows);
    // rank-2 input: the projection captures all variance, so pairwise
    // distances between projected points equal those between raw rows
    for i in 0..rows.min(20) {
        for j in (i + 1)..rows.min(20) {
            let (ai, bi) = coeffs[i];
            let (aj, bj) = coeffs[j];
            let raw = ((ai - aj).powi(2) + (bi - bj).powi(2)).sqrt();
            let pi = &report.points[i];
            let pj = &report.points[j];
            let proj = ((pi.x - pj.x).powi(2) + (pi.y - pj.y).powi(2)).sqrt();
            assert!(
                (raw - proj).abs() < 1e-8,
                "distance {raw} vs {proj} for rows {i},{j}"
            );
        }
    }
    assert!(report.sigma[0] >= report.sigma[1]);
    assert!(report.sigma[1] > 0.0);
}

#[test]
fn pca_variance_ranking_flags_the_spread_out_feature() {
    let game = MiniHanabi::default_mini();
    let mut net = tiny_net(&game, 0);
    let cfg = net.config.clone();
    let idx = net.params.index_of("embed_feat").unwrap();
    // all rows identical except one feature's value range, which fans out
    let target = cfg
        .feature_names
        .iter()
        .position(|n| cfg.cardinalities[cfg.feature_names.iter().position(|m| m == n).unwrap()] >= 3)
        .unwrap();
    let offset: usize = cfg.cardinalities[..target].iter().sum();
    let card = cfg.cardinalities[target];
    {
        let t = net.params.get_mut(idx);
        let cols = t.shape[1];
        for x in t.data.iter_mut() {
            *x = 1.0;
        }
        for v in 0..card {
            t.data[(offset + v) * cols] = 10.0 * v as f64;
            t.data[(offset + v) * cols + 1] = -5.0 * v as f64;
        }
    }
    let report = embedding_pca(&net).unwrap();
    assert_eq!(report.feature_variance[0].0, cfg.feature_names[target]);
    assert!(report.feature_variance[0].1 > report.feature_variance[1].1);
}

#[test]
fn attention_export_covers_every_layer_and_rows_normalize() {
    let game = Arc::new(MiniHanabi::default_mini());
    let pool = scripted_pool(game.clone(), 1, 0).unwrap();
    let net = tiny_net(game.as_ref(), 9);
    let member = pool.members[0].clone();
    let episode =
        gbc_core::policy::run_episode(game.as_ref(), [member.as_ref(), member.as_ref()], 5, gbc_core::policy::ActMode::Greedy)
            .unwrap();
    let traj = episode.trajectories[0].prefix(4);
    let truth = game.hidden_features(&episode.states[4], 0);
    let records = attention_maps(&net, &traj, &truth).unwrap();
    // encoder self + decoder self + cross per layer, per head
    assert_eq!(records.len(), 3 * net.config.layers * net.config.heads);
    for rec in &records {
        let (rows, cols) = (rec.probs.shape[0], rec.probs.shape[1]);
        for r in 0..rows {
            let sum: f64 = rec.probs.data[r * cols..(r + 1) * cols].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
    }
}

#[test]
fn score_histogram_is_a_density_and_rejects_bad_scores() {
    let hist = score_histogram(&[0.0, 2.0, 2.0, 5.0], 6).unwrap();
    assert_eq!(hist.len(), 7);
    assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(hist[2], 0.5);
    assert_eq!(hist[1], 0.0);
    assert!(score_histogram(&[1.5], 6).is_err());
    assert!(score_histogram(&[7.0], 6).is_err());
    assert!(score_histogram(&[], 6).is_err());
}

#[test]
fn csv_schemas_and_float_precision_round_trip() {
    let curve = vec![gbc_core::toolkit::CePoint {
        timestep: 3,
        mean: std::f64::consts::PI,
        sem: 1.0 / 3.0,
        n_games: 17,
    }];
    let mut buf = Vec::new();
    write_ce_curve_csv(&mut buf, &curve).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "timestep,mean,sem,n_games");
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[0], "3");
    assert_eq!(fields[1].parse::<f64>().unwrap(), std::f64::consts::PI);
    assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0 / 3.0);
    assert_eq!(fields[3], "17");

    let mut buf = Vec::new();
    write_xp_csv(
        &mut buf,
        &[XpRow {
            method: "gbs-exact".into(),
            partner: "pool-0".into(),
            mean: 4.25,
            sem: 0.125,
            games: 500,
        }],
    )
    .unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("method,partner,mean,sem,games\n"));
    assert!(text.contains("gbs-exact,pool-0,"));
    assert!(write_xp_csv(
        &mut Vec::new(),
        &[XpRow {
            method: "a,b".into(),
            partner: "c".into(),
            mean: 0.0,
            sem: 0.0,
            games: 1
        }]
    )
    .is_err());

    let game = MiniHanabi::default_mini();
    let net = tiny_net(&game, 2);
    let report = embedding_pca(&net).unwrap();
    let mut buf = Vec::new();
    write_pca_csv(&mut buf, &report).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("feature_type,value_index,x,y\n"));
    assert_eq!(text.lines().count(), 1 + report.points.len());
}

#[test]
fn attention_csv_row_count_matches_matrices() {
    let game = Arc::new(MiniHanabi::default_mini());
    let pool = scripted_pool(game.clone(), 1, 0).unwrap();
    let net = tiny_net(game.as_ref(), 1);
    let member = pool.members[0].clone();
    let episode = gbc_core::policy::run_episode(
        game.as_ref(),
        [member.as_ref(), member.as_ref()],
        8,
        gbc_core::policy::ActMode::Greedy,
    )
    .unwrap();
    let traj = episode.trajectories[1].prefix(3);
    let truth = game.hidden_features(&episode.states[3], 1);
    let records = attention_maps(&net, &traj, &truth).unwrap();
    let mut buf = Vec::new();
    write_attention_csv(&mut buf, &records).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("kind,layer,head,row,col,weight\n"));
    let expected: usize = records
        .iter()
        .map(|r| r.probs.shape[0] * r.probs.shape[1])
        .sum();
    assert_eq!(text.lines().count(), 1 + expected);
}

#[test]
fn identical_runs_produce_byte_identical_manifests() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let game = Arc::new(MiniHanabi::default_mini());
    let pool = scripted_pool(game.clone(), 2, 0).unwrap();
    let emit = |dir: &std::path::Path| -> Vec<u8> {
        let curve = eval_ce_curve(&pool, &GroundedEvaluator, 5, 42).unwrap();
        let csv_path = dir.join("ce_curve.csv");
        let mut f = std::fs::File::create(&csv_path).unwrap();
        write_ce_curve_csv(&mut f, &curve).unwrap();
        drop(f);
        let mut manifest = Manifest::new("belief-eval", "deadbeef", vec![42]);
        manifest.add_file(&csv_path).unwrap();
        let manifest_path = dir.join("manifest.json");
        write_manifest(&manifest_path, &manifest).unwrap();
        std::fs::read(&manifest_path).unwrap()
    };
    assert_eq!(emit(dir_a.path()), emit(dir_b.path()));
}

#[test]
fn ce_curve_rejects_degenerate_inputs() {
    let game = Arc::new(MiniHanabi::default_mini());
    let empty = PolicyPool::new(game.clone());
    assert!(eval_ce_curve(&empty, &GroundedEvaluator, 5, 0).is_err());
    let pool = scripted_pool(game, 1, 0).unwrap();
    assert!(eval_ce_curve(&pool, &GroundedEvaluator, 0, 0).is_err());
}
