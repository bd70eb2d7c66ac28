//! Evaluation harness: aggregate metrics over episode traces, seed banks
//! with enforced train/test disjointness, SVG replay export, and the flat
//! key=value configuration layer used by the command-line tool.

use crate::env::{stage_spec, Env, EnvConfig, EpisodeTrace, Termination};
use crate::geom::Point2;
use crate::ppo::{scales_for_stage, Policy, TrainConfig};
use crate::reward::{select_config, RewardVariant};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("scenario bank: train and test seeds overlap ({0} shared)")]
    BankOverlap(usize),
}

// ---------------------------------------------------------------------------
// metrics

/// Aggregates over a set of evaluation episodes. Time, distance, speed, and
/// acceleration statistics cover successful episodes only, so they are not
/// skewed by early collisions or timeouts. `success_rate` is a percentage;
/// `total_abs_acc` sums the per-step Euclidean acceleration norm over every
/// step of every successful episode.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub success_rate: f64,
    pub mean_time: f64,
    pub mean_distance: f64,
    pub mean_speed: f64,
    pub total_abs_acc: f64,
}

pub fn compute_metrics(traces: &[EpisodeTrace], t_c: f64) -> Metrics {
    let mut m = Metrics {
        episodes: traces.len(),
        ..Default::default()
    };
    let mut time_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut speed_sum = 0.0;
    let mut accel_sum = 0.0;
    for trace in traces {
        match trace.termination {
            Termination::Success => m.successes += 1,
            Termination::Collision => m.collisions += 1,
            Termination::Timeout => m.timeouts += 1,
            Termination::Running => {}
        }
        if trace.termination != Termination::Success {
            continue;
        }
        let time = trace.steps.len() as f64 * t_c;
        let mut dist = 0.0;
        let mut prev = trace.start;
        let mut accel = 0.0;
        for step in &trace.steps {
            let pos = step.state.position();
            dist += prev.distance(pos);
            prev = pos;
            accel += step.state.accel_norm();
        }
        time_sum += time;
        dist_sum += dist;
        speed_sum += dist / time;
        accel_sum += accel;
    }
    if m.episodes > 0 {
        m.success_rate = 100.0 * m.successes as f64 / m.episodes as f64;
    }
    if m.successes > 0 {
        let n = m.successes as f64;
        m.mean_time = time_sum / n;
        m.mean_distance = dist_sum / n;
        m.mean_speed = speed_sum / n;
        m.total_abs_acc = accel_sum;
    }
    m
}

// ---------------------------------------------------------------------------
// scenario banks

/// Named seed sets for one stage. Train and test must be disjoint; the
/// loader re-checks so a hand-edited bank cannot silently leak test
/// scenarios into training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioBank {
    pub stage: usize,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
}

impl ScenarioBank {
    /// Default split: train seeds count upward from a low base, test seeds
    /// from a high base, guaranteeing disjointness by construction.
    pub fn generate(stage: usize, n_train: usize, n_test: usize) -> ScenarioBank {
        ScenarioBank {
            stage,
            train_seeds: (0..n_train as u64).collect(),
            test_seeds: (0..n_test as u64).map(|k| 1_000_000 + k).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let train: std::collections::BTreeSet<u64> = self.train_seeds.iter().copied().collect();
        let shared = self
            .test_seeds
            .iter()
            .filter(|s| train.contains(s))
            .count();
        if shared > 0 {
            return Err(HarnessError::BankOverlap(shared));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ScenarioBank, HarnessError> {
        let bank: ScenarioBank = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        bank.validate()?;
        Ok(bank)
    }
}

// ---------------------------------------------------------------------------
// evaluation

/// Roll the deterministic policy over the seeds and collect full traces
/// plus aggregate metrics.
pub fn evaluate(
    policy: &Policy,
    stage_id: usize,
    seeds: &[u64],
    env_config: &EnvConfig,
) -> Result<(Metrics, Vec<EpisodeTrace>), HarnessError> {
    let stage = stage_spec(stage_id);
    let scales = scales_for_stage(&stage, env_config);
    let mut traces = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (mut env, mut state) = Env::reset(&stage, seed, env_config.clone())?;
        while !env.done {
            let obs = state.normalized(&scales);
            let action = policy.act_mean(&obs);
            let (next, _, _) = env.step(action);
            state = next;
        }
        traces.push(env.trace.clone());
    }
    let metrics = compute_metrics(&traces, env_config.mpc.t_c);
    Ok((metrics, traces))
}

// ---------------------------------------------------------------------------
// replay export

/// Render one episode as a standalone SVG: arena, static obstacles, dynamic
/// disc positions at the final step (with earlier positions ghosted), the
/// robot path, and the last convex region.
pub fn replay_svg(trace: &EpisodeTrace, arena_w: f64, arena_h: f64) -> String {
    let scale = 30.0;
    let w = arena_w * scale;
    let h = arena_h * scale;
    // flip y so the world's +y points up in the image
    let tx = |p: Point2| (p.x * scale, h - p.y * scale);
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = write!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"#fafafa\" stroke=\"#333\"/>\n"
    );

    if let Some(last) = trace.steps.last() {
        // last convex region
        let pts: Vec<String> = last
            .region
            .iter()
            .map(|&p| {
                let (x, y) = tx(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = write!(
            svg,
            "<polygon points=\"{}\" fill=\"#cde8ff\" fill-opacity=\"0.5\" stroke=\"#5599dd\"/>\n",
            pts.join(" ")
        );
        // ghosted then final dynamic discs
        let ghost_every = (trace.steps.len() / 6).max(1);
        for (i, step) in trace.steps.iter().enumerate() {
            if i % ghost_every != 0 && i + 1 != trace.steps.len() {
                continue;
            }
            let final_step = i + 1 == trace.steps.len();
            for &(cx, cy, r) in &step.discs {
                let (x, y) = tx(Point2::new(cx, cy));
                let opacity = if final_step { 0.9 } else { 0.15 };
                let _ = write!(
                    svg,
                    "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{:.2}\" fill=\"#d66\" fill-opacity=\"{opacity}\"/>\n",
                    r * scale
                );
            }
        }
    }

    // robot path
    let mut path: Vec<String> = Vec::with_capacity(trace.steps.len() + 1);
    let (sx, sy) = tx(trace.start);
    path.push(format!("{sx:.2},{sy:.2}"));
    for step in &trace.steps {
        let (x, y) = tx(step.state.position());
        path.push(format!("{x:.2},{y:.2}"));
    }
    let _ = write!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#222\" stroke-width=\"2\"/>\n",
        path.join(" ")
    );

    let (gx, gy) = tx(trace.goal);
    let _ = write!(
        svg,
        "<circle cx=\"{gx:.2}\" cy=\"{gy:.2}\" r=\"6\" fill=\"#2a2\"/>\n"
    );
    let _ = write!(
        svg,
        "<circle cx=\"{sx:.2}\" cy=\"{sy:.2}\" r=\"5\" fill=\"#22a\"/>\n"
    );
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// flat key=value configuration

/// Parsed flat configuration: one `key = value` pair per line, `#` comments.
#[derive(Clone, Debug, Default)]
pub struct FlatConfig {
    pub entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<FlatConfig, HarnessError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config {
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FlatConfig { entries })
    }

    pub fn load(path: &Path) -> Result<FlatConfig, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| HarnessError::BadValue {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

/// Apply a flat config onto the default training configuration. Every key
/// must be in the schema; unknown keys and unparsable values are hard
/// errors that name the offending key.
pub fn apply_config(flat: &FlatConfig, base: TrainConfig) -> Result<TrainConfig, HarnessError> {
    let mut c = base;
    for (key, value) in &flat.entries {
        match key.as_str() {
            "seed" => c.seed = parse_as(key, value)?,
            "hidden" => c.hidden = parse_as(key, value)?,
            "n_envs" => c.n_envs = parse_as(key, value)?,
            "rollout_steps" => c.rollout_steps = parse_as(key, value)?,
            "minibatch" => c.minibatch = parse_as(key, value)?,
            "epochs" => c.epochs = parse_as(key, value)?,
            "gamma" => c.gamma = parse_as(key, value)?,
            "lam" => c.lam = parse_as(key, value)?,
            "clip" => c.clip = parse_as(key, value)?,
            "ent_coef" => c.ent_coef = parse_as(key, value)?,
            "lr_policy" => c.lr_policy = parse_as(key, value)?,
            "lr_value" => c.lr_value = parse_as(key, value)?,
            "max_grad_norm" => c.max_grad_norm = parse_as(key, value)?,
            "stage_budget" => c.stage_budget = parse_as(key, value)?,
            "success_window" => c.success_window = parse_as(key, value)?,
            "stages" => {
                let mut stages = Vec::new();
                for part in value.split(',') {
                    stages.push(parse_as::<usize>(key, part.trim())?);
                }
                c.stages = stages;
            }
            "reward_variant" => {
                let variant: RewardVariant = value.parse().map_err(|e: String| {
                    HarnessError::BadValue {
                        key: key.clone(),
                        msg: e,
                    }
                })?;
                let toggles = select_config(variant);
                c.env.reward.enable_c = toggles.enable_c;
                c.env.reward.enable_f = toggles.enable_f;
            }
            "lidar_beams" => c.env.lidar_beams = parse_as(key, value)?,
            "lidar_range" => c.env.lidar_range = parse_as(key, value)?,
            "robot_radius" => {
                c.env.robot_radius = parse_as(key, value)?;
                c.env.inflate = c.env.robot_radius;
            }
            "rnum_v" => c.env.rnum_v = parse_as(key, value)?,
            "seed_sides" => c.env.seed_sides = parse_as(key, value)?,
            "step_limit" => c.env.step_limit = parse_as(key, value)?,
            "substeps" => c.env.substeps = parse_as(key, value)?,
            "t_c" => c.env.mpc.t_c = parse_as(key, value)?,
            "horizon" => c.env.mpc.n = parse_as(key, value)?,
            "v_max" => c.env.mpc.limits.v_max = parse_as(key, value)?,
            "a_max" => c.env.mpc.limits.a_max = parse_as(key, value)?,
            "j_max" => c.env.mpc.limits.j_max = parse_as(key, value)?,
            "w_track" => c.env.mpc.w_track = parse_as(key, value)?,
            "w_smooth" => c.env.mpc.w_smooth = parse_as(key, value)?,
            "w_vend" => c.env.mpc.w_vend = parse_as(key, value)?,
            "w_aend" => c.env.mpc.w_aend = parse_as(key, value)?,
            "mpc_max_iter" => c.env.mpc.max_iter = parse_as(key, value)?,
            "mpc_tol" => c.env.mpc.tol = parse_as(key, value)?,
            "r_success" => c.env.reward.r_success = parse_as(key, value)?,
            "r_collision" => c.env.reward.r_collision = parse_as(key, value)?,
            "r_obs" => c.env.reward.r_obs = parse_as(key, value)?,
            "w_obs" => c.env.reward.w_obs = parse_as(key, value)?,
            "w_approach" => c.env.reward.w_approach = parse_as(key, value)?,
            "r_step" => c.env.reward.r_step = parse_as(key, value)?,
            "d_th" => c.env.reward.d_th = parse_as(key, value)?,
            other => return Err(HarnessError::UnknownKey(other.to_string())),
        }
    }
    Ok(c)
}

/// Dump every schema key with its effective value, sorted, one per line —
/// written next to training artifacts so a run's configuration is explicit.
pub fn resolved_config(c: &TrainConfig) -> String {
    let stages = c
        .stages
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let pairs: Vec<(&str, String)> = vec![
        ("a_max", c.env.mpc.limits.a_max.to_string()),
        ("clip", c.clip.to_string()),
        ("d_th", c.env.reward.d_th.to_string()),
        ("ent_coef", c.ent_coef.to_string()),
        ("epochs", c.epochs.to_string()),
        ("gamma", c.gamma.to_string()),
        ("hidden", c.hidden.to_string()),
        ("horizon", c.env.mpc.n.to_string()),
        ("j_max", c.env.mpc.limits.j_max.to_string()),
        ("lam", c.lam.to_string()),
        ("lidar_beams", c.env.lidar_beams.to_string()),
        ("lidar_range", c.env.lidar_range.to_string()),
        ("lr_policy", c.lr_policy.to_string()),
        ("lr_value", c.lr_value.to_string()),
        ("max_grad_norm", c.max_grad_norm.to_string()),
        ("minibatch", c.minibatch.to_string()),
        ("mpc_max_iter", c.env.mpc.max_iter.to_string()),
        ("mpc_tol", c.env.mpc.tol.to_string()),
        ("n_envs", c.n_envs.to_string()),
        ("r_collision", c.env.reward.r_collision.to_string()),
        ("r_obs", c.env.reward.r_obs.to_string()),
        ("r_step", c.env.reward.r_step.to_string()),
        ("r_success", c.env.reward.r_success.to_string()),
        ("reward_variant", reward_variant_name(&c)),
        ("rnum_v", c.env.rnum_v.to_string()),
        ("robot_radius", c.env.robot_radius.to_string()),
        ("rollout_steps", c.rollout_steps.to_string()),
        ("seed", c.seed.to_string()),
        ("seed_sides", c.env.seed_sides.to_string()),
        ("stage_budget", c.stage_budget.to_string()),
        ("stages", stages),
        ("step_limit", c.env.step_limit.to_string()),
        ("substeps", c.env.substeps.to_string()),
        ("success_window", c.success_window.to_string()),
        ("t_c", c.env.mpc.t_c.to_string()),
        ("v_max", c.env.mpc.limits.v_max.to_string()),
        ("w_aend", c.env.mpc.w_aend.to_string()),
        ("w_approach", c.env.reward.w_approach.to_string()),
        ("w_obs", c.env.reward.w_obs.to_string()),
        ("w_smooth", c.env.mpc.w_smooth.to_string()),
        ("w_track", c.env.mpc.w_track.to_string()),
        ("w_vend", c.env.mpc.w_vend.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

fn reward_variant_name(c: &TrainConfig) -> String {
    match (c.env.reward.enable_c, c.env.reward.enable_f) {
        (true, true) => "rt1",
        (false, true) => "rt2",
        (true, false) => "rt3",
        (false, false) => "rt4",
    }
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::RawAction;
    use crate::env::{Env, StepFlags};
    use crate::ppo::Policy;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_episode(stage: usize, seed: u64) -> EpisodeTrace {
        let (mut env, _) = Env::reset(&stage_spec(stage), seed, EnvConfig::default()).unwrap();
        let mut k = 0u32;
        while !env.done && k < 30 {
            env.step(RawAction {
                alpha_s: 0.2,
                beta_s: 0.7,
                alpha_l: 0.1,
                beta_l: 0.6,
            });
            k += 1;
        }
        env.trace.clone()
    }

    #[test]
    fn metrics_over_hand_built_traces() {
        // one success: 2 steps of t_c, known positions
        let mut success = run_episode(1, 1);
        success.termination = Termination::Success;
        let mut fail = run_episode(1, 2);
        fail.termination = Termination::Collision;
        let t_c = 0.2;
        let m = compute_metrics(&[success.clone(), fail], t_c);
        assert_eq!(m.episodes, 2);
        assert_eq!(m.successes, 1);
        assert_eq!(m.collisions, 1);
        assert!((m.success_rate - 50.0).abs() < 1e-12);
        // per-episode aggregates from the successful trace only
        let expect_time = success.steps.len() as f64 * t_c;
        assert!((m.mean_time - expect_time).abs() < 1e-12);
        let mut dist = 0.0;
        let mut prev = success.start;
        let mut accel = 0.0;
        for s in &success.steps {
            dist += prev.distance(s.state.position());
            prev = s.state.position();
            accel += s.state.accel_norm();
        }
        assert!((m.mean_distance - dist).abs() < 1e-12);
        assert!((m.mean_speed - dist / expect_time).abs() < 1e-12);
        assert!((m.total_abs_acc - accel).abs() < 1e-12);
    }

    #[test]
    fn metrics_empty_input() {
        let m = compute_metrics(&[], 0.2);
        assert_eq!(m.episodes, 0);
        assert_eq!(m.success_rate, 0.0);
    }

    #[test]
    fn bank_disjointness_enforced() {
        let bank = ScenarioBank::generate(1, 100, 50);
        bank.validate().unwrap();
        let bad = ScenarioBank {
            stage: 1,
            train_seeds: vec![1, 2, 3],
            test_seeds: vec![3, 4],
        };
        assert!(matches!(bad.validate(), Err(HarnessError::BankOverlap(1))));
        // load path re-validates
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(ScenarioBank::load(&path).is_err());
        bank.save(&path).unwrap();
        let loaded = ScenarioBank::load(&path).unwrap();
        assert_eq!(loaded.train_seeds, bank.train_seeds);
    }

    #[test]
    fn trace_json_round_trip_is_byte_identical() {
        let trace = run_episode(3, 7);
        let a = serde_json::to_string(&trace).unwrap();
        let parsed: EpisodeTrace = serde_json::from_str(&a).unwrap();
        let b = serde_json::to_string(&parsed).unwrap();
        assert_eq!(a, b);
        // same for the jsonl form
        let l1 = trace.to_jsonl();
        assert_eq!(l1.lines().count(), trace.steps.len() + 1);
    }

    #[test]
    fn svg_export_contains_scene() {
        let trace = run_episode(3, 7);
        let svg = replay_svg(&trace, 20.0, 30.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("polygon")); // convex region
        assert!(svg.contains("circle")); // goal marker
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn evaluate_random_policy_on_stage1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = crate::obs::StackedState::dim(16);
        let policy = Policy::new(dim, 16, &mut rng);
        let config = EnvConfig {
            step_limit: 20,
            ..Default::default()
        };
        let (metrics, traces) = evaluate(&policy, 1, &[10, 11, 12], &config).unwrap();
        assert_eq!(metrics.episodes, 3);
        assert_eq!(traces.len(), 3);
        for t in &traces {
            assert!(t.termination != Termination::Running);
        }
    }

    #[test]
    fn config_parse_apply_and_errors() {
        let text = "\n# comment\nseed = 9\ngamma = 0.98 # inline\nstages = 1, 2, 3\nreward_variant = rt3\n";
        let flat = FlatConfig::parse(text).unwrap();
        let c = apply_config(&flat, TrainConfig::default()).unwrap();
        assert_eq!(c.seed, 9);
        assert!((c.gamma - 0.98).abs() < 1e-12);
        assert_eq!(c.stages, vec![1, 2, 3]);
        assert!(c.env.reward.enable_c && !c.env.reward.enable_f);

        let unknown = FlatConfig::parse("nope = 1").unwrap();
        let err = apply_config(&unknown, TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("nope"));

        let bad = FlatConfig::parse("gamma = fast").unwrap();
        let err = apply_config(&bad, TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gamma"));

        let malformed = FlatConfig::parse("just a line");
        assert!(malformed.is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_parser() {
        let c = TrainConfig::default();
        let dump = resolved_config(&c);
        let flat = FlatConfig::parse(&dump).unwrap();
        let c2 = apply_config(&flat, TrainConfig::default()).unwrap();
        assert_eq!(resolved_config(&c2), dump);
    }

    #[test]
    fn unused_step_flags_shape() {
        // StepFlags is re-exported through env; sanity-check Serialize
        let f = StepFlags {
            done: true,
            termination: Termination::Success,
        };
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("Success"));
    }
}
