//! Policy-pool invariants: scripted determinism, relabelling conjugation
//! checked against the color-symmetry of the game itself, cross-play gap,
//! and checkpoint round trips.

use gbc_core::env::{Game, MiniHanabi};
use gbc_core::policy::{
    act, crossplay_matrix, invert_permutation, run_episode, run_episode_from, save_policy,
    scripted_pool, train_selfplay, ActMode, Policy, PolicyPool, QConfig, RecurrentQPolicy,
    Relabelled, ScriptedConvention, UniformRandom,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn mini() -> Arc<MiniHanabi> {
    Arc::new(MiniHanabi::default_mini())
}

fn action_sequence(game: &MiniHanabi, players: [&dyn Policy; 2], seed: u64) -> Vec<usize> {
    run_episode(game, players, seed, ActMode::Greedy)
        .unwrap()
        .trajectories[0]
        .steps
        .iter()
        .skip(1)
        .map(|s| s.action.unwrap())
        .collect()
}

#[test]
fn scripted_greedy_is_deterministic() {
    let game = mini();
    let p = ScriptedConvention::new(game.clone(), 3);
    let state = game.new_game(9);
    let legal = game.legal_actions(&state).unwrap();
    let obs = game.observe(&state, 0);
    let mut ctx = p.begin_episode();
    p.observe(&mut ctx, &obs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = act(&p, &ctx, &legal, ActMode::Greedy, &mut rng).unwrap();
    for _ in 0..99 {
        assert_eq!(
            act(&p, &ctx, &legal, ActMode::Greedy, &mut rng).unwrap(),
            first
        );
    }
}

#[test]
fn identity_relabelling_is_behaviourally_identical() {
    let game = mini();
    let p: Arc<dyn Policy> = Arc::new(ScriptedConvention::new(game.clone(), 1));
    let rel = Relabelled::new(game.clone(), p.clone(), vec![0, 1]).unwrap();
    for seed in 0..200u64 {
        assert_eq!(
            action_sequence(&game, [p.as_ref(), p.as_ref()], seed),
            action_sequence(&game, [&rel, &rel], seed)
        );
    }
}

#[test]
fn swap_relabelling_is_an_involution() {
    let game = mini();
    let p: Arc<dyn Policy> = Arc::new(ScriptedConvention::new(game.clone(), 2));
    let once: Arc<dyn Policy> =
        Arc::new(Relabelled::new(game.clone(), p.clone(), vec![1, 0]).unwrap());
    let twice = Relabelled::new(game.clone(), once.clone(), vec![1, 0]).unwrap();
    for seed in 0..200u64 {
        assert_eq!(
            action_sequence(&game, [p.as_ref(), p.as_ref()], seed),
            action_sequence(&game, [&twice, &twice], seed)
        );
    }
}

#[test]
fn conjugation_matches_game_color_symmetry() {
    // the relabelled pair playing deck D must score exactly what the
    // original pair scores on the color-renamed deck sigma^-1(D), because
    // the game rules are color-symmetric
    let game = mini();
    let cfg = &game.config;
    let perm = vec![1usize, 0];
    let inv = invert_permutation(&perm);
    let p: Arc<dyn Policy> = Arc::new(ScriptedConvention::new(game.clone(), 5));
    let rel = Relabelled::new(game.clone(), p.clone(), perm.clone()).unwrap();
    for seed in 0..100u64 {
        let deck = game.new_game(seed).deck.clone();
        // full deck: reconstruct deal + remaining from a fresh game
        let state = game.new_game(seed);
        let mut full = Vec::new();
        full.extend(&state.hands[0]);
        full.extend(&state.hands[1]);
        full.extend(&state.deck);
        let renamed: Vec<usize> = full
            .iter()
            .map(|&id| cfg.card_id(inv[cfg.color_of(id)], cfg.rank_of(id)))
            .collect();
        let a = run_episode_from(
            &game,
            game.new_game_with_deck(full),
            [&rel, &rel],
            seed,
            ActMode::Greedy,
        )
        .unwrap();
        let b = run_episode_from(
            &game,
            game.new_game_with_deck(renamed),
            [p.as_ref(), p.as_ref()],
            seed,
            ActMode::Greedy,
        )
        .unwrap();
        assert_eq!(a.score, b.score, "seed {seed}");
        let _ = deck;
    }
}

#[test]
fn conjugation_is_exact_per_observation() {
    // P_sigma(o)[sigma(a)] == P(sigma^-1 o)[a] on every decision of real play
    let game = mini();
    let perm = vec![1usize, 0];
    let inv = invert_permutation(&perm);
    let p: Arc<dyn Policy> = Arc::new(ScriptedConvention::new(game.clone(), 7));
    let rel = Relabelled::new(game.clone(), p.clone(), perm.clone()).unwrap();
    for seed in 0..50u64 {
        let ep = run_episode(&game, [p.as_ref(), p.as_ref()], seed, ActMode::Greedy).unwrap();
        for (t, state) in ep.states.iter().enumerate() {
            if game.is_terminal(state) {
                continue;
            }
            let actor = game.current_player(state);
            let obs = game.observe(state, actor);
            let legal = game.legal_actions(state).unwrap();

            let mut ctx_rel = rel.begin_episode();
            rel.observe(&mut ctx_rel, &obs).unwrap();
            let probs_rel = rel.action_probs(&ctx_rel, &legal).unwrap();

            let obs_inner = game.relabel_observation(&obs, &inv);
            let legal_inner: Vec<usize> =
                legal.iter().map(|&a| game.relabel_action(a, &inv)).collect();
            let mut ctx_p = p.begin_episode();
            p.observe(&mut ctx_p, &obs_inner).unwrap();
            let probs_p = p.action_probs(&ctx_p, &legal_inner).unwrap();

            for &a in &legal {
                let a_inner = game.relabel_action(a, &inv);
                assert_eq!(
                    probs_rel[a], probs_p[a_inner],
                    "seed {seed} turn {t} action {a}"
                );
            }
        }
    }
}

#[test]
fn scripted_selfplay_beats_random_play() {
    let game = mini();
    let p = ScriptedConvention::new(game.clone(), 0);
    let random = UniformRandom::new(&game);
    let games = 300;
    let mean = |players: [&dyn Policy; 2], mode| {
        (0..games)
            .map(|g| run_episode(&game, players, g, mode).unwrap().score)
            .sum::<f64>()
            / games as f64
    };
    let scripted_score = mean([&p, &p], ActMode::Greedy);
    let random_score = mean([&random, &random], ActMode::Sample);
    assert!(
        scripted_score > random_score + 1.0,
        "scripted {scripted_score} vs random {random_score}"
    );
}

#[test]
fn crossplay_gap_for_scripted_pool() {
    let game = mini();
    let pool = scripted_pool(game, 4, 11).unwrap();
    let xp = crossplay_matrix(&pool, 60, 123).unwrap();
    assert_eq!(xp.mean.len(), 16);
    let diag = xp.mean_diagonal();
    let off = xp.mean_off_diagonal();
    assert!(
        off < diag,
        "no convention gap: diag {diag:.3} vs off-diag {off:.3}"
    );
}

#[test]
fn singleton_pool_matrix_is_selfplay() {
    let game = mini();
    let mut pool = PolicyPool::new(game.clone());
    let p: Arc<dyn Policy> = Arc::new(ScriptedConvention::new(game.clone(), 4));
    pool.push(p.clone(), "solo");
    let xp = crossplay_matrix(&pool, 40, 7).unwrap();
    assert_eq!(xp.n, 1);
    let direct: f64 = (0..40)
        .map(|g| {
            // same per-game seed stream the matrix uses
            run_episode(&game, [p.as_ref(), p.as_ref()], xp_seed(7, 0, 0, g), ActMode::Greedy)
                .unwrap()
                .score
        })
        .sum::<f64>()
        / 40.0;
    assert!((xp.cell(0, 0).0 - direct).abs() < 1e-12);
}

// mirror of the matrix's internal per-cell seed stream, kept in the test as
// an independent statement of the contract
fn xp_seed(seed: u64, row: usize, col: usize, g: usize) -> u64 {
    let mut z = seed
        .wrapping_add((row as u64) << 40)
        .wrapping_add((col as u64) << 20)
        .wrapping_add(g as u64)
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[test]
fn sem_shrinks_with_more_games() {
    let game = mini();
    let pool = scripted_pool(game, 2, 3).unwrap();
    let small = crossplay_matrix(&pool, 50, 1).unwrap();
    let large = crossplay_matrix(&pool, 200, 1).unwrap();
    let mean_sem = |m: &gbc_core::policy::CrossPlayMatrix| {
        m.sem.iter().sum::<f64>() / m.sem.len() as f64
    };
    assert!(mean_sem(&large) < mean_sem(&small) * 0.8);
}

#[test]
fn policy_checkpoints_round_trip_behaviour() {
    let game = mini();
    let dir = tempfile::tempdir().unwrap();

    let scripted: Arc<dyn Policy> = Arc::new(ScriptedConvention::new(game.clone(), 13));
    let rel: Arc<dyn Policy> =
        Arc::new(Relabelled::new(game.clone(), scripted.clone(), vec![1, 0]).unwrap());
    let q: Arc<dyn Policy> = Arc::new(RecurrentQPolicy::new(
        game.clone(),
        QConfig::default(),
        21,
    ));
    for (name, policy) in [("scripted", &scripted), ("rel", &rel), ("q", &q)] {
        let path = dir.path().join(format!("{name}.pol"));
        save_policy(&path, &game, policy.as_ref()).unwrap();
        let loaded = gbc_core::policy::load_policy(&path, game.clone()).unwrap();
        for seed in 0..30u64 {
            assert_eq!(
                action_sequence(&game, [policy.as_ref(), policy.as_ref()], seed),
                action_sequence(&game, [loaded.as_ref(), loaded.as_ref()], seed),
                "{name} seed {seed}"
            );
        }
    }
}

#[test]
fn zero_budget_returns_initialized_policy() {
    let game = mini();
    let trained = train_selfplay(game.clone(), QConfig::default(), 5, 0).unwrap();
    let fresh = RecurrentQPolicy::new(game.clone(), QConfig::default(), 5);
    for seed in 0..20u64 {
        assert_eq!(
            action_sequence(&game, [&trained, &trained], seed),
            action_sequence(&game, [&fresh, &fresh], seed)
        );
    }
}

#[test]
fn q_training_runs_and_stays_finite() {
    let game = mini();
    let config = QConfig {
        target_update_every: 10,
        ..QConfig::default()
    };
    let trained = train_selfplay(game.clone(), config, 1, 40).unwrap();
    // greedy play must still work and be deterministic
    let a = action_sequence(&game, [&trained, &trained], 3);
    let b = action_sequence(&game, [&trained, &trained], 3);
    assert_eq!(a, b);
    assert!(!a.is_empty());
}

#[test]
#[ignore = "training run, ~minutes; exercised by the training CLI path"]
fn q_selfplay_beats_random_after_training() {
    let game = mini();
    let config = QConfig {
        lr: 1e-3,
        ..QConfig::default()
    };
    let trained = train_selfplay(game.clone(), config, 7, 20_000).unwrap();
    let random = UniformRandom::new(&game);
    let games = 500;
    let mean = |players: [&dyn Policy; 2], mode| {
        (0..games)
            .map(|g| run_episode(&game, players, g, mode).unwrap().score)
            .sum::<f64>()
            / games as f64
    };
    let q_score = mean([&trained, &trained], ActMode::Greedy);
    let r_score = mean([&random, &random], ActMode::Sample);
    assert!(
        q_score > r_score + 1.0,
        "q {q_score:.3} vs random {r_score:.3}"
    );
}
