//! Command-line front end: train the curriculum, evaluate or replay a
//! checkpoint, micro-benchmark the geometry and MPC layers, and run a quick
//! self-test.

use clap::{Parser, Subcommand};
use convex_nav::env::{stage_spec, Env, EnvConfig};
use convex_nav::geom::{build_convex_region, normalize_vertex_count, point_in_convex, Point2};
use convex_nav::harness::{
    apply_config, compute_metrics, evaluate, replay_svg, resolved_config, FlatConfig, ScenarioBank,
};
use convex_nav::mpc::{solve_mpc, MpcParams, MpcProblem, MpcStatus};
use convex_nav::ppo::{train_curriculum, Checkpoint, TrainConfig};
use convex_nav::dynamics::RobotState;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "cnav", about = "2D navigation: convex regions, MPC tracking, RL training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the staged curriculum trainer
    Train {
        /// Flat key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints, curves, resolved config
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint file
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a stage
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stage: usize,
        /// Scenario bank JSON; its test seeds are used
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Number of generated test seeds when no bank is given
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Write metrics JSON and per-episode traces here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Replay one episode to SVG and JSONL
    Replay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Benchmark convex region extraction
    BenchGeom {
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 360)]
        points: usize,
    },
    /// Benchmark the tracking controller
    BenchMpc {
        #[arg(long, default_value_t = 200)]
        iterations: usize,
    },
    /// Quick internal consistency checks
    Selftest,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig, Box<dyn std::error::Error>> {
    match path {
        Some(p) => {
            let flat = FlatConfig::load(p)?;
            Ok(apply_config(&flat, TrainConfig::default())?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn run() -> Result<(), Box<dyn std::error::Error>> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            checkpoint,
        } => {
            let mut train = load_train_config(&config)?;
            if let Some(s) = seed {
                train.seed = s;
            }
            train.out_dir = Some(out.clone());
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("resolved_config.txt"), resolved_config(&train))?;
            let resume = match checkpoint {
                Some(p) => Some(Checkpoint::load(&p)?),
                None => None,
            };
            let result = train_curriculum(&train, resume.as_ref())?;
            println!("total env steps: {}", result.total_env_steps);
            for r in &result.reports {
                println!(
                    "stage {}: {} steps, {} iterations, success {:.1}%, promoted: {}, {:.0}s",
                    r.stage,
                    r.env_steps,
                    r.iterations,
                    r.final_success_rate * 100.0,
                    r.promoted,
                    r.seconds
                );
            }
        }
        Command::Eval {
            checkpoint,
            stage,
            bank,
            episodes,
            out,
            config,
        } => {
            let train = load_train_config(&config)?;
            let learner = Checkpoint::load(&checkpoint)?.restore()?;
            let seeds: Vec<u64> = match bank {
                Some(p) => {
                    let b = ScenarioBank::load(&p)?;
                    if b.stage != stage {
                        return Err(format!(
                            "bank is for stage {}, requested stage {stage}",
                            b.stage
                        )
                        .into());
                    }
                    b.test_seeds
                }
                None => ScenarioBank::generate(stage, 0, episodes).test_seeds,
            };
            let (metrics, traces) = evaluate(&learner.policy, stage, &seeds, &train.env)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
                std::fs::write(
                    dir.join("metrics.csv"),
                    format!(
                        "success_rate_pct,mean_time_s,mean_distance_m,mean_speed_mps,total_abs_acc\n{},{},{},{},{}\n",
                        metrics.success_rate,
                        metrics.mean_time,
                        metrics.mean_distance,
                        metrics.mean_speed,
                        metrics.total_abs_acc
                    ),
                )?;
                let mut all = String::new();
                for t in &traces {
                    all.push_str(&t.to_jsonl());
                }
                std::fs::write(dir.join("traces.jsonl"), all)?;
            }
        }
        Command::Replay {
            checkpoint,
            stage,
            seed,
            out,
            config,
        } => {
            let train = load_train_config(&config)?;
            let learner = Checkpoint::load(&checkpoint)?.restore()?;
            let (_, traces) = evaluate(&learner.policy, stage, &[seed], &train.env)?;
            let trace = &traces[0];
            let spec = stage_spec(stage);
            std::fs::create_dir_all(&out)?;
            let svg = replay_svg(trace, spec.arena_w, spec.arena_h);
            std::fs::write(out.join(format!("replay_s{stage}_{seed}.svg")), svg)?;
            std::fs::write(
                out.join(format!("replay_s{stage}_{seed}.jsonl")),
                trace.to_jsonl(),
            )?;
            println!(
                "episode: {:?} in {} steps",
                trace.termination,
                trace.steps.len()
            );
        }
        Command::BenchGeom { iterations, points } => {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let clouds: Vec<Vec<Point2>> = (0..iterations)
                .map(|_| {
                    (0..points)
                        .map(|_| {
                            let r = rng.gen_range(0.5..8.0);
                            let a = rng.gen_range(0.0..std::f64::consts::TAU);
                            Point2::from_polar(r, a)
                        })
                        .collect()
                })
                .collect();
            let start = Instant::now();
            let mut checksum = 0usize;
            for cloud in &clouds {
                let region = build_convex_region(cloud, Point2::ZERO, 8.0, 24);
                let region = normalize_vertex_count(&region, 16);
                checksum += region.num_vertices();
            }
            let elapsed = start.elapsed();
            println!(
                "{iterations} regions from {points}-point clouds: {:.3} ms total, {:.3} ms/region (checksum {checksum})",
                elapsed.as_secs_f64() * 1e3,
                elapsed.as_secs_f64() * 1e3 / iterations as f64
            );
        }
        Command::BenchMpc { iterations } => {
            let params = MpcParams::default();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let problems: Vec<MpcProblem> = (0..iterations)
                .map(|_| {
                    let cloud: Vec<Point2> = (0..30)
                        .map(|_| {
                            let r = rng.gen_range(2.0..8.0);
                            let a = rng.gen_range(0.0..std::f64::consts::TAU);
                            Point2::from_polar(r, a)
                        })
                        .collect();
                    let region = normalize_vertex_count(
                        &build_convex_region(&cloud, Point2::ZERO, 8.0, 24),
                        16,
                    );
                    let q_short = region.centroid() * 0.1;
                    let q_long = region.centroid() * 0.6;
                    MpcProblem {
                        x_init: RobotState {
                            vx: rng.gen_range(-1.0..1.0),
                            vy: rng.gen_range(-1.0..1.0),
                            ..RobotState::at_rest(0.0, 0.0)
                        },
                        q_short,
                        q_long,
                        goal_in_convex: point_in_convex(&region, q_long),
                        region,
                    }
                })
                .collect();
            let mut times = Vec::with_capacity(iterations);
            let mut solved = 0usize;
            for p in &problems {
                let start = Instant::now();
                let sol = solve_mpc(p, &params).expect("start inside region");
                times.push(start.elapsed().as_secs_f64() * 1e3);
                if sol.status != MpcStatus::Failed {
                    solved += 1;
                }
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "{iterations} solves: median {:.3} ms, p90 {:.3} ms, solved {}",
                times[iterations / 2],
                times[(iterations * 9) / 10],
                solved
            );
        }
        Command::Selftest => {
            // region exclusion on a fixed cloud
            let cloud: Vec<Point2> = (0..72)
                .map(|k| Point2::from_polar(3.0, k as f64 * 0.0873))
                .collect();
            let region = build_convex_region(&cloud, Point2::ZERO, 8.0, 24);
            let ok = cloud.iter().all(|&p| {
                !point_in_convex(&region, p + (p * (0.001 / p.norm())))
            });
            println!("region excludes cloud: {}", if ok { "pass" } else { "FAIL" });

            // env determinism
            let digest = |seed: u64| {
                let (mut env, _) =
                    Env::reset(&stage_spec(3), seed, EnvConfig::default()).unwrap();
                for _ in 0..10 {
                    if env.done {
                        break;
                    }
                    env.step(convex_nav::actions::RawAction {
                        alpha_s: 0.4,
                        beta_s: 0.6,
                        alpha_l: 0.1,
                        beta_l: 0.5,
                    });
                }
                env.trace.to_jsonl()
            };
            let det = digest(5) == digest(5);
            println!("environment deterministic: {}", if det { "pass" } else { "FAIL" });

            // metrics on an empty set
            let m = compute_metrics(&[], 0.2);
            println!(
                "metrics zero-safe: {}",
                if m.episodes == 0 { "pass" } else { "FAIL" }
            );
            if !(ok && det && m.episodes == 0) {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
