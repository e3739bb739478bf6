//! Command-line driver: train policy pools and belief models, evaluate
//! belief quality and search-based coordination, and export introspection
//! artifacts with reproducibility manifests.

use clap::{Parser, Subcommand};
use gbc_core::belief::{train_belief, BeliefNet, LossPoint, TrainConfig, TrainMode};
use gbc_core::coordination::{
    evaluate_crossplay, train_best_response, BeliefSampler, ExactSampler, GroundedSampler,
    NetSampler, SearchConfig, Seat,
};
use gbc_core::env::{Game, GameConfig, MiniHanabi};
use gbc_core::policy::{
    crossplay_matrix, digest_hex, load_policy, run_episode, save_policy, scripted_pool,
    train_selfplay, ActMode, PolicyPool, QConfig,
};
use gbc_core::tensor::{load_checkpoint, save_checkpoint};
use gbc_core::toolkit::{
    attention_maps, embedding_pca, eval_ce_curve, score_histogram, semantic_ce,
    write_attention_csv, write_ce_curve_csv, write_manifest, write_pca_csv, write_xp_csv,
    ExactEvaluator, GroundedEvaluator, LearnedEvaluator, Manifest, XpRow,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "gbc", version, about = "Generalized belief learning for Mini-Hanabi")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a policy pool of scripted conventions and self-play Q networks.
    PoolTrain {
        /// Directory the pool is written into.
        #[arg(long)]
        out: PathBuf,
        /// Number of scripted-convention members.
        #[arg(long, default_value_t = 4)]
        scripted: usize,
        /// Number of self-play Q-network members.
        #[arg(long, default_value_t = 0)]
        qnets: usize,
        /// Training episodes per Q network.
        #[arg(long, default_value_t = 2000)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-play matrix over every ordered pool pairing.
    PoolXp {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 200)]
        games: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (a manifest is written next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the belief transformer on pool self-play.
    BeliefTrain {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Data-generation worker threads (0 = single-threaded).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Optional CSV of train/eval cross-entropy over steps.
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Per-timestep hand cross-entropy of a belief model on pool play.
    BeliefEval {
        #[arg(long)]
        pool: PathBuf,
        /// Checkpoint of a trained belief net (required for learned/semantic).
        #[arg(long)]
        belief: Option<PathBuf>,
        /// learned | grounded | exact | semantic
        #[arg(long, default_value = "learned")]
        evaluator: String,
        #[arg(long, default_value_t = 200)]
        games: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a best response to the pool, optionally belief-conditioned.
    CoordBr {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        belief: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-play of belief-driven search against every pool member.
    CoordSearchEval {
        #[arg(long)]
        pool: PathBuf,
        /// exact | grounded | net
        #[arg(long, default_value = "exact")]
        sampler: String,
        #[arg(long)]
        belief: Option<PathBuf>,
        /// Pool index of the search seat's blueprint policy.
        #[arg(long, default_value_t = 0)]
        blueprint: usize,
        #[arg(long, default_value_t = 100)]
        games: usize,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention maps and the embedding PCA of a belief net.
    Introspect {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        belief: PathBuf,
        /// Game seed whose trajectory the attention maps are taken from.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score histogram of pool self-play.
    Report {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 500)]
        games: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PoolIndex {
    config: GameConfig,
    members: Vec<String>,
}

fn save_pool(dir: &Path, pool: &PolicyPool) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut members = Vec::new();
    for (i, member) in pool.members.iter().enumerate() {
        let name = format!("member_{i:03}.ckpt");
        save_policy(&dir.join(&name), pool.game.as_ref(), member.as_ref())?;
        members.push(name);
    }
    let index = PoolIndex {
        config: pool.game.config.clone(),
        members,
    };
    std::fs::write(dir.join("pool.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

fn load_pool(dir: &Path) -> anyhow::Result<PolicyPool> {
    let index: PoolIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("pool.json"))?)?;
    let game = Arc::new(MiniHanabi::new(index.config)?);
    let mut pool = PolicyPool::new(game.clone());
    for name in &index.members {
        let policy = load_policy(&dir.join(name), game.clone())?;
        pool.push(policy, name);
    }
    Ok(pool)
}

fn load_belief(path: &Path) -> anyhow::Result<Arc<BeliefNet>> {
    Ok(Arc::new(BeliefNet::from_checkpoint(load_checkpoint(path)?)?))
}

fn finish_manifest(
    out: &Path,
    command: &str,
    digest: &str,
    seeds: Vec<u64>,
    artifacts: &[&Path],
) -> anyhow::Result<()> {
    let mut manifest = Manifest::new(command, digest, seeds);
    for artifact in artifacts {
        manifest.add_file(artifact)?;
    }
    write_manifest(out, &manifest)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn write_loss_csv(path: &Path, losses: &[LossPoint]) -> anyhow::Result<()> {
    use std::io::Write;
    let mut f = File::create(path)?;
    writeln!(f, "step,lr,train_ce,eval_ce")?;
    for p in losses {
        writeln!(
            f,
            "{},{:.16e},{:.16e},{:.16e}",
            p.step, p.lr, p.train_ce, p.eval_ce
        )?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::PoolTrain {
            out,
            scripted,
            qnets,
            budget,
            seed,
        } => {
            let game = Arc::new(MiniHanabi::default_mini());
            let mut pool = scripted_pool(game.clone(), scripted, seed)?;
            for i in 0..qnets {
                let q_seed = seed.wrapping_add(1000 + i as u64);
                eprintln!("training q-net {i} ({budget} episodes)");
                let policy = train_selfplay(game.clone(), QConfig::default(), q_seed, budget)?;
                pool.push(Arc::new(policy), &format!("recurrent-q seed {q_seed}"));
            }
            save_pool(&out, &pool)?;
            println!(
                "pool of {} members written to {}",
                pool.len(),
                out.display()
            );
        }
        Command::PoolXp {
            pool,
            games,
            seed,
            out,
        } => {
            let pool = load_pool(&pool)?;
            let matrix = crossplay_matrix(&pool, games, seed)?;
            let mut rows = Vec::new();
            for i in 0..pool.len() {
                for j in 0..pool.len() {
                    let (mean, sem) = matrix.cell(i, j);
                    rows.push(XpRow {
                        method: format!("member-{i}"),
                        partner: format!("member-{j}"),
                        mean,
                        sem,
                        games,
                    });
                }
            }
            let mut f = File::create(&out)?;
            write_xp_csv(&mut f, &rows)?;
            drop(f);
            finish_manifest(
                &manifest_path(&out),
                "pool-xp",
                &digest_hex(&pool.game.config.digest()),
                vec![seed],
                &[&out],
            )?;
            println!(
                "cross-play: diagonal {:.3}, off-diagonal {:.3}",
                matrix.mean_diagonal(),
                matrix.mean_off_diagonal()
            );
        }
        Command::BeliefTrain {
            pool,
            out,
            steps,
            seed,
            workers,
            loss_out,
        } => {
            let pool = Arc::new(load_pool(&pool)?);
            let config = TrainConfig {
                steps,
                seed,
                ..TrainConfig::default()
            };
            let mode = if workers == 0 {
                TrainMode::SingleThread
            } else {
                TrainMode::Threaded { workers }
            };
            let (net, losses) = train_belief(pool.clone(), &config, mode)?;
            save_checkpoint(&out, &net.to_checkpoint())?;
            let mut artifacts: Vec<&Path> = vec![&out];
            if let Some(loss_path) = &loss_out {
                write_loss_csv(loss_path, &losses)?;
                artifacts.push(loss_path);
            }
            finish_manifest(
                &manifest_path(&out),
                "belief-train",
                &digest_hex(&net.config.digest()),
                vec![seed],
                &artifacts,
            )?;
            if let Some(last) = losses.last() {
                println!(
                    "trained {} steps, final train ce {:.4}",
                    last.step, last.train_ce
                );
            }
        }
        Command::BeliefEval {
            pool,
            belief,
            evaluator,
            games,
            seed,
            out,
        } => {
            let pool = load_pool(&pool)?;
            let digest = digest_hex(&pool.game.config.digest());
            let curve = match evaluator.as_str() {
                "grounded" => eval_ce_curve(&pool, &GroundedEvaluator, games, seed)?,
                "exact" => eval_ce_curve(&pool, &ExactEvaluator, games, seed)?,
                "learned" => {
                    let net = load_belief(belief.as_deref().ok_or_else(|| {
                        anyhow::anyhow!("--belief is required for the learned evaluator")
                    })?)?;
                    eval_ce_curve(&pool, &LearnedEvaluator(net), games, seed)?
                }
                "semantic" => {
                    let net = load_belief(belief.as_deref().ok_or_else(|| {
                        anyhow::anyhow!("--belief is required for the semantic evaluator")
                    })?)?;
                    semantic_ce(&pool, &net, games, seed)?
                }
                other => anyhow::bail!("unknown evaluator {other:?}"),
            };
            let mut f = File::create(&out)?;
            write_ce_curve_csv(&mut f, &curve)?;
            drop(f);
            finish_manifest(&manifest_path(&out), "belief-eval", &digest, vec![seed], &[&out])?;
            let overall: f64 = curve.iter().map(|p| p.mean * p.n_games as f64).sum::<f64>()
                / curve.iter().map(|p| p.n_games as f64).sum::<f64>();
            println!("{evaluator} cross-entropy: {overall:.4} nats/slot");
        }
        Command::CoordBr {
            pool,
            belief,
            episodes,
            seed,
            out,
        } => {
            let pool = Arc::new(load_pool(&pool)?);
            let net = belief.as_deref().map(load_belief).transpose()?;
            let br = train_best_response(pool.clone(), QConfig::default(), net, seed, episodes)?;
            save_checkpoint(&out, &br.to_checkpoint())?;
            finish_manifest(
                &manifest_path(&out),
                "coord-br",
                &digest_hex(&pool.game.config.digest()),
                vec![seed],
                &[&out],
            )?;
            println!("best response trained for {episodes} episodes");
        }
        Command::CoordSearchEval {
            pool,
            sampler,
            belief,
            blueprint,
            games,
            samples,
            rollouts,
            seed,
            out,
        } => {
            let pool = load_pool(&pool)?;
            let game = pool.game.clone();
            anyhow::ensure!(blueprint < pool.len(), "blueprint index out of range");
            let blueprint_policy = pool.members[blueprint].clone();
            let config = SearchConfig {
                samples_per_decision: samples,
                rollouts_per_move: rollouts,
                deviation_margin: 0.0,
                seed,
            };
            let sampler_kind = sampler;
            let mut rows = Vec::new();
            for (j, partner) in pool.members.iter().enumerate() {
                let sampler: Arc<dyn BeliefSampler<MiniHanabi>> = match sampler_kind.as_str() {
                    "exact" => Arc::new(ExactSampler {
                        partner: partner.clone(),
                    }),
                    "grounded" => Arc::new(GroundedSampler),
                    "net" => Arc::new(NetSampler {
                        net: load_belief(belief.as_deref().ok_or_else(|| {
                            anyhow::anyhow!("--belief is required for the net sampler")
                        })?)?,
                    }),
                    other => anyhow::bail!("unknown sampler {other:?}"),
                };
                let search_seat = Seat::Search {
                    blueprint: blueprint_policy.clone(),
                    belief: sampler,
                    pool: pool.members.clone(),
                    config: config.clone(),
                };
                let partner_seat = Seat::Policy(partner.clone());
                let report =
                    evaluate_crossplay(&game, &search_seat, &partner_seat, games, seed)?;
                println!(
                    "vs member-{j}: {:.3} +- {:.3}",
                    report.mean, report.sem
                );
                rows.push(XpRow {
                    method: format!("gbs-{sampler_kind}"),
                    partner: format!("member-{j}"),
                    mean: report.mean,
                    sem: report.sem,
                    games,
                });
            }
            let mut f = File::create(&out)?;
            write_xp_csv(&mut f, &rows)?;
            drop(f);
            finish_manifest(
                &manifest_path(&out),
                "coord-search-eval",
                &digest_hex(&game.config.digest()),
                vec![seed],
                &[&out],
            )?;
        }
        Command::Introspect {
            pool,
            belief,
            seed,
            out_dir,
        } => {
            let pool = load_pool(&pool)?;
            let game = pool.game.clone();
            let net = load_belief(&belief)?;
            std::fs::create_dir_all(&out_dir)?;
            let member = pool.members[0].clone();
            let episode = run_episode(
                game.as_ref(),
                [member.as_ref(), member.as_ref()],
                seed,
                ActMode::Sample,
            )?;
            let turns = episode.trajectories[0].num_turns();
            let t = turns.min(turns.div_ceil(2).max(1));
            let traj = episode.trajectories[0].prefix(t);
            let truth = game.hidden_features(&episode.states[t], 0);
            let attention = attention_maps(&net, &traj, &truth)?;
            let attn_path = out_dir.join("attention.csv");
            let mut f = File::create(&attn_path)?;
            write_attention_csv(&mut f, &attention)?;
            drop(f);
            let pca = embedding_pca(&net)?;
            let pca_path = out_dir.join("embedding_pca.csv");
            let mut f = File::create(&pca_path)?;
            write_pca_csv(&mut f, &pca)?;
            drop(f);
            finish_manifest(
                &out_dir.join("manifest.json"),
                "introspect",
                &digest_hex(&net.config.digest()),
                vec![seed],
                &[&attn_path, &pca_path],
            )?;
            println!("top feature by embedding spread: {}", pca.feature_variance[0].0);
        }
        Command::Report {
            pool,
            games,
            seed,
            out,
        } => {
            let pool = load_pool(&pool)?;
            let game = pool.game.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scores = Vec::with_capacity(games);
            for _ in 0..games {
                let member = pool.members[rng.gen_range(0..pool.len())].clone();
                let episode = run_episode(
                    game.as_ref(),
                    [member.as_ref(), member.as_ref()],
                    rng.gen(),
                    ActMode::Sample,
                )?;
                scores.push(episode.score);
            }
            let hist = score_histogram(&scores, game.max_score() as usize)?;
            use std::io::Write;
            let mut f = File::create(&out)?;
            writeln!(f, "score,density")?;
            for (score, density) in hist.iter().enumerate() {
                writeln!(f, "{score},{density:.16e}")?;
            }
            drop(f);
            finish_manifest(
                &manifest_path(&out),
                "report",
                &digest_hex(&game.config.digest()),
                vec![seed],
                &[&out],
            )?;
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            println!("mean self-play score over {games} games: {mean:.3}");
        }
    }
    Ok(())
}
