//! Deterministic 2D world: stage-parameterized scenario generation, dynamic
//! disc movers, raycast LiDAR, collision and goal detection, and the per-step
//! loop wiring region extraction, action decoding, MPC, observation, and
//! reward together.
//!
//! Coordinates are in meters with the arena spanning [0, w] x [0, h]. Every
//! world is generated and evolved from its own seeded RNG stream, so a fixed
//! (stage, seed) pair reproduces an episode bit for bit.

use crate::actions::{decode, goal_shortcut, reach_radii, RawAction, ReferencePoints};
use crate::dynamics::{discretize, step as dyn_step, Jerk, RobotState};
use crate::geom::{build_convex_region, normalize_vertex_count, ConvexRegion, Point2};
use crate::mpc::{solve_mpc, MpcParams, MpcProblem, MpcSolution, MpcStatus};
use crate::obs::{compose_observation, FrameHistory, StackedState};
use crate::reward::{compute_reward, RewardBreakdown, RewardConfig, StepContext};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("scenario placement failed after {0} rejection samples")]
    PlacementFailed(usize),
}

/// Obstacle parameters for one curriculum stage.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: usize,
    pub arena_w: f64,
    pub arena_h: f64,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub dyn_radius_range: (f64, f64),
    pub dyn_speed_range: (f64, f64),
}

/// The seven built-in stages used for curriculum training and evaluation.
pub fn builtin_stages() -> [StageSpec; 7] {
    let big = (20.0, 30.0);
    let small = (10.0, 10.0);
    [
        stage(1, big, 0, 0, (0.0, 0.0), (0.0, 0.0)),
        stage(2, big, 10, 0, (0.0, 0.0), (0.0, 0.0)),
        stage(3, big, 10, 5, (0.2, 0.3), (0.3, 0.3)),
        stage(4, big, 10, 10, (0.2, 0.3), (0.3, 0.3)),
        stage(5, small, 0, 10, (0.1, 0.4), (0.3, 0.6)),
        stage(6, small, 0, 20, (0.1, 0.4), (0.3, 0.6)),
        stage(7, small, 0, 30, (0.1, 0.4), (0.3, 0.6)),
    ]
}

pub fn stage_spec(id: usize) -> StageSpec {
    assert!((1..=7).contains(&id), "stage id must be 1..=7");
    builtin_stages()[id - 1]
}

fn stage(
    id: usize,
    (arena_w, arena_h): (f64, f64),
    n_static: usize,
    n_dynamic: usize,
    dyn_radius_range: (f64, f64),
    dyn_speed_range: (f64, f64),
) -> StageSpec {
    StageSpec {
        id,
        arena_w,
        arena_h,
        n_static,
        n_dynamic,
        dyn_radius_range,
        dyn_speed_range,
    }
}

/// Simulator knobs that are not part of any stage definition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvConfig {
    pub lidar_beams: usize,
    pub lidar_range: f64,
    pub lidar_noise_std: f64,
    pub robot_radius: f64,
    pub seed_sides: usize,
    pub rnum_v: usize,
    pub step_limit: usize,
    pub substeps: usize,
    pub mpc: MpcParams,
    pub reward: RewardConfig,
    /// Cloud points are pulled toward the robot by this much before region
    /// building so the containment constraint keeps the body clear, not just
    /// the center. Defaults to the robot radius.
    pub inflate: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            lidar_beams: 360,
            lidar_range: 8.0,
            lidar_noise_std: 0.0,
            robot_radius: 0.3,
            seed_sides: 24,
            rnum_v: 16,
            step_limit: 150,
            substeps: 10,
            // Simulation-grade solve settings: containment rows are at distance
            // scale, so a 1e-3 residual is ~1 mm -- well inside the body margin
            // already baked into the cloud inflation.
            mpc: MpcParams {
                tol: 1e-3,
                max_iter: 1500,
                ..MpcParams::default()
            },
            reward: RewardConfig::default(),
            inflate: 0.3,
        }
    }
}

/// Dynamic disc obstacle: constant-speed straight-line walker that picks a
/// fresh uniform waypoint on arrival. Ignores the robot and other obstacles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Disc {
    pub center: Point2,
    pub radius: f64,
    pub speed: f64,
    pub waypoint: Point2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct World {
    pub stage: StageSpec,
    pub seed: u64,
    pub statics: Vec<Vec<Point2>>,
    pub discs: Vec<Disc>,
    pub robot: RobotState,
    pub goal: Point2,
    pub steps: usize,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LidarScan {
    pub ranges: Vec<f64>,
    pub max_range: f64,
}

impl LidarScan {
    pub fn min_range(&self) -> f64 {
        self.ranges.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn angle(&self, beam: usize) -> f64 {
        std::f64::consts::TAU * beam as f64 / self.ranges.len() as f64
    }
}

const MAX_REJECTIONS: usize = 10_000;

/// Generate a world for (stage, seed). Start and goal keep
/// `robot_radius + 0.2` clearance from every obstacle; the start-goal
/// distance is at least 8 m in 20x30 arenas and 4 m in 10x10 arenas.
pub fn generate_scenario(
    stage: &StageSpec,
    seed: u64,
    config: &EnvConfig,
) -> Result<World, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stage.id as u64) << 56);
    let margin = config.robot_radius + 0.2;
    let min_dist = if stage.arena_w >= 20.0 { 8.0 } else { 4.0 };

    let sample_point = |rng: &mut ChaCha8Rng, margin: f64| {
        Point2::new(
            rng.gen_range(margin..stage.arena_w - margin),
            rng.gen_range(margin..stage.arena_h - margin),
        )
    };

    let mut rejections = 0usize;
    let (start, goal) = loop {
        let s = sample_point(&mut rng, margin);
        let g = sample_point(&mut rng, margin);
        if s.distance(g) >= min_dist {
            break (s, g);
        }
        rejections += 1;
        if rejections > MAX_REJECTIONS {
            return Err(EnvError::PlacementFailed(rejections));
        }
    };

    let clear_of_endpoints = |shape_min_dist: &dyn Fn(Point2) -> f64| {
        shape_min_dist(start) > margin && shape_min_dist(goal) > margin
    };

    let mut statics = Vec::with_capacity(stage.n_static);
    while statics.len() < stage.n_static {
        let poly = random_polygon(&mut rng, stage);
        let dist_fn = |p: Point2| polygon_distance(&poly, p);
        if clear_of_endpoints(&dist_fn) {
            statics.push(poly);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(EnvError::PlacementFailed(rejections));
            }
        }
    }

    let mut discs = Vec::with_capacity(stage.n_dynamic);
    while discs.len() < stage.n_dynamic {
        let radius = rng.gen_range(stage.dyn_radius_range.0..=stage.dyn_radius_range.1);
        let speed = rng.gen_range(stage.dyn_speed_range.0..=stage.dyn_speed_range.1);
        let center = sample_point(&mut rng, radius);
        let waypoint = sample_point(&mut rng, radius);
        let dist_fn = |p: Point2| center.distance(p) - radius;
        if clear_of_endpoints(&dist_fn) {
            discs.push(Disc {
                center,
                radius,
                speed,
                waypoint,
            });
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(EnvError::PlacementFailed(rejections));
            }
        }
    }

    Ok(World {
        stage: *stage,
        seed,
        statics,
        discs,
        robot: RobotState::at_rest(start.x, start.y),
        goal,
        steps: 0,
        rng,
    })
}

/// Random convex polygon with 3 or 4 vertices and area at most 2 m^2:
/// polar vertices around a sampled center, rejected until convex and small
/// enough.
fn random_polygon(rng: &mut ChaCha8Rng, stage: &StageSpec) -> Vec<Point2> {
    loop {
        let sides = if rng.gen_bool(0.5) { 3 } else { 4 };
        let center = Point2::new(
            rng.gen_range(1.0..stage.arena_w - 1.0),
            rng.gen_range(1.0..stage.arena_h - 1.0),
        );
        let mut angles: Vec<f64> = (0..sides)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let verts: Vec<Point2> = angles
            .iter()
            .map(|&a| center + Point2::from_polar(rng.gen_range(0.3..1.0), a))
            .collect();
        if !is_convex_ccw(&verts) {
            continue;
        }
        if polygon_area(&verts) > 2.0 {
            continue;
        }
        return verts;
    }
}

fn is_convex_ccw(verts: &[Point2]) -> bool {
    let n = verts.len();
    (0..n).all(|j| {
        let a = verts[j];
        let b = verts[(j + 1) % n];
        let c = verts[(j + 2) % n];
        (b - a).cross(c - b) > 1e-9
    })
}

fn polygon_area(verts: &[Point2]) -> f64 {
    let n = verts.len();
    let twice: f64 = (0..n)
        .map(|j| verts[j].cross(verts[(j + 1) % n]))
        .sum();
    (twice * 0.5).abs()
}

fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len_sq = ab.dot(ab);
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Distance from `p` to the polygon boundary; negative when inside.
fn polygon_distance(verts: &[Point2], p: Point2) -> f64 {
    let n = verts.len();
    let boundary = (0..n)
        .map(|j| point_segment_distance(p, verts[j], verts[(j + 1) % n]))
        .fold(f64::INFINITY, f64::min);
    let inside = (0..n).all(|j| {
        let a = verts[j];
        let b = verts[(j + 1) % n];
        (b - a).cross(p - a) >= 0.0
    });
    if inside {
        -boundary
    } else {
        boundary
    }
}

fn ray_segment_hit(origin: Point2, dir: Point2, a: Point2, b: Point2) -> Option<f64> {
    let ab = b - a;
    let denom = dir.cross(ab);
    if denom.abs() < 1e-15 {
        return None;
    }
    let ao = a - origin;
    let t = ao.cross(ab) / denom;
    let s = ao.cross(dir) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&s) {
        Some(t)
    } else {
        None
    }
}

fn ray_circle_hit(origin: Point2, dir: Point2, center: Point2, radius: f64) -> Option<f64> {
    let rel = origin - center;
    let b = rel.dot(dir);
    let c = rel.dot(rel) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sqrt = disc.sqrt();
    let t0 = -b - sqrt;
    let t1 = -b + sqrt;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(0.0) // origin inside the disc
    } else {
        None
    }
}

impl World {
    pub fn arena_walls(&self) -> [(Point2, Point2); 4] {
        let w = self.stage.arena_w;
        let h = self.stage.arena_h;
        [
            (Point2::new(0.0, 0.0), Point2::new(w, 0.0)),
            (Point2::new(w, 0.0), Point2::new(w, h)),
            (Point2::new(w, h), Point2::new(0.0, h)),
            (Point2::new(0.0, h), Point2::new(0.0, 0.0)),
        ]
    }

    /// Minimum distance from a point to any obstacle surface or wall.
    pub fn min_obstacle_distance(&self, p: Point2) -> f64 {
        let mut d = f64::INFINITY;
        for (a, b) in self.arena_walls() {
            d = d.min(point_segment_distance(p, a, b));
        }
        for poly in &self.statics {
            d = d.min(polygon_distance(poly, p));
        }
        for disc in &self.discs {
            d = d.min(disc.center.distance(p) - disc.radius);
        }
        d
    }

    fn advance_discs(&mut self, dt: f64) {
        let w = self.stage.arena_w;
        let h = self.stage.arena_h;
        for i in 0..self.discs.len() {
            let mut remaining = dt;
            while remaining > 1e-12 {
                let disc = &self.discs[i];
                let to_wp = disc.waypoint - disc.center;
                let dist = to_wp.norm();
                if dist < disc.speed * remaining || dist < 1e-9 {
                    // arrive and resample
                    let travel = if disc.speed > 0.0 {
                        dist / disc.speed
                    } else {
                        remaining
                    };
                    let r = disc.radius;
                    let new_wp = Point2::new(
                        self.rng.gen_range(r..w - r),
                        self.rng.gen_range(r..h - r),
                    );
                    let disc = &mut self.discs[i];
                    disc.center = disc.waypoint;
                    disc.waypoint = new_wp;
                    remaining -= travel.min(remaining);
                } else {
                    let step_vec = to_wp * (disc.speed * remaining / dist);
                    self.discs[i].center = disc.center + step_vec;
                    remaining = 0.0;
                }
            }
        }
    }
}

/// Analytic raycast over walls, static polygon edges, and dynamic discs,
/// capped at the sensor range.
pub fn lidar(world: &World, config: &EnvConfig) -> LidarScan {
    let origin = world.robot.position();
    let beams = config.lidar_beams;
    let mut ranges = Vec::with_capacity(beams);
    for b in 0..beams {
        let angle = std::f64::consts::TAU * b as f64 / beams as f64;
        let dir = Point2::new(angle.cos(), angle.sin());
        let mut best = config.lidar_range;
        for (a, bb) in world.arena_walls() {
            if let Some(t) = ray_segment_hit(origin, dir, a, bb) {
                best = best.min(t);
            }
        }
        for poly in &world.statics {
            let n = poly.len();
            for j in 0..n {
                if let Some(t) = ray_segment_hit(origin, dir, poly[j], poly[(j + 1) % n]) {
                    best = best.min(t);
                }
            }
        }
        for disc in &world.discs {
            if let Some(t) = ray_circle_hit(origin, dir, disc.center, disc.radius) {
                best = best.min(t);
            }
        }
        ranges.push(best.max(0.0));
    }
    LidarScan {
        ranges,
        max_range: config.lidar_range,
    }
}

/// Why an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Running,
    Success,
    Collision,
    Timeout,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepFlags {
    pub done: bool,
    pub termination: Termination,
}

/// Per-step trace record for metrics and replay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub state: RobotState,
    pub scan_min: f64,
    pub region: Vec<Point2>,
    pub action: RawAction,
    pub refs: ReferencePoints,
    pub q_star: Vec<Point2>,
    pub mpc_status: MpcStatus,
    pub reward: RewardBreakdown,
    pub termination: Termination,
    pub discs: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub stage: usize,
    pub seed: u64,
    pub goal: Point2,
    pub start: Point2,
    pub steps: Vec<TraceStep>,
    pub termination: Termination,
}

impl Default for Termination {
    fn default() -> Self {
        Termination::Running
    }
}

impl EpisodeTrace {
    /// JSON-lines dump: one header line then one record per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = serde_json::json!({
            "stage": self.stage,
            "seed": self.seed,
            "start": [self.start.x, self.start.y],
            "goal": [self.goal.x, self.goal.y],
            "termination": self.termination,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("trace step serializes"));
            out.push('\n');
        }
        out
    }
}

/// One environment: world plus the per-step pipeline state (current region,
/// frame history, previous action and MPC solve).
pub struct Env {
    pub config: EnvConfig,
    pub world: World,
    pub region: ConvexRegion,
    pub scan: LidarScan,
    history: FrameHistory,
    prev_refs: Option<ReferencePoints>,
    prev_mpc: Option<MpcSolution>,
    d_prev: f64,
    t: usize,
    pub trace: EpisodeTrace,
    pub done: bool,
}

impl Env {
    pub fn reset(stage: &StageSpec, seed: u64, config: EnvConfig) -> Result<(Env, StackedState), EnvError> {
        let world = generate_scenario(stage, seed, &config)?;
        let scan = lidar(&world, &config);
        let region = region_from_scan(&world, &scan, &config);
        let d0 = world.robot.position().distance(world.goal);
        let obs = compose_observation(&world.robot, world.goal, &region, None, None, config.rnum_v);
        let mut history = FrameHistory::new();
        let stacked = history.push_and_stack(obs);
        let trace = EpisodeTrace {
            stage: stage.id,
            seed,
            goal: world.goal,
            start: world.robot.position(),
            steps: Vec::new(),
            termination: Termination::Running,
        };
        Ok((
            Env {
                config,
                world,
                region,
                scan,
                history,
                prev_refs: None,
                prev_mpc: None,
                d_prev: d0,
                t: 0,
                trace,
                done: false,
            },
            stacked,
        ))
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Advance one control period with the given raw action.
    pub fn step(&mut self, raw: RawAction) -> (StackedState, RewardBreakdown, StepFlags) {
        assert!(!self.done, "episode already finished");
        self.t += 1;
        let config = self.config.clone();
        let origin = self.world.robot.position();

        // 1-2: decode the action inside the current region, goal shortcut
        let (r_s, r_l) = reach_radii(self.world.robot.speed(), &config.mpc);
        let refs = decode(&raw, &self.region, origin, r_s, r_l)
            .map(|d| goal_shortcut(&self.region, self.world.goal, &d))
            .unwrap_or_else(|_| {
                // start pushed onto the boundary by numerics: hold position
                ReferencePoints {
                    q_short: origin,
                    q_long: origin,
                    theta_s: 0.0,
                    theta_l: 0.0,
                    d_s: 0.0,
                    d_l: 0.0,
                    goal_in_convex: false,
                }
            });

        // 3: solve the MPC over the current region
        let problem = MpcProblem {
            x_init: self.world.robot,
            q_short: refs.q_short,
            q_long: refs.q_long,
            region: self.region.clone(),
            goal_in_convex: refs.goal_in_convex,
        };
        let mpc_sol = solve_mpc(&problem, &config.mpc).ok();
        let (u0, mpc_status) = match &mpc_sol {
            Some(sol) if sol.status != MpcStatus::Failed => (sol.u_star[0], sol.status),
            _ => (self.emergency_brake(), MpcStatus::Failed),
        };

        // 4-6: integrate with substeps, move obstacles, detect contact
        let sub_dt = config.mpc.t_c / config.substeps as f64;
        let model = discretize(sub_dt).expect("positive substep");
        let mut min_clearance = f64::INFINITY;
        for _ in 0..config.substeps {
            self.world.robot = dyn_step(&self.world.robot, u0, &model);
            self.world.advance_discs(sub_dt);
            let clearance =
                self.world.min_obstacle_distance(self.world.robot.position()) - config.robot_radius;
            min_clearance = min_clearance.min(clearance);
        }
        let d_now = self.world.robot.position().distance(self.world.goal);

        // 7: reward, fresh scan and region, next observation
        let ctx = StepContext {
            t: self.t,
            d_now,
            d_prev: self.d_prev,
            clearance: min_clearance,
            q_short: refs.q_short,
            q_long: refs.q_long,
            q_short_prev: self.prev_refs.map_or(refs.q_short, |r| r.q_short),
            q_long_prev: self.prev_refs.map_or(refs.q_long, |r| r.q_long),
            q1_star: mpc_sol
                .as_ref()
                .map_or(origin, |s| s.q_star[0]),
            qn_star: mpc_sol
                .as_ref()
                .map_or(origin, |s| *s.q_star.last().unwrap()),
        };
        let reward = compute_reward(&ctx, &config.reward);

        let termination = if min_clearance <= 0.0 {
            Termination::Collision
        } else if d_now < config.reward.d_th {
            Termination::Success
        } else if self.t >= config.step_limit {
            Termination::Timeout
        } else {
            Termination::Running
        };
        let done = termination != Termination::Running;

        self.scan = lidar(&self.world, &config);
        self.region = region_from_scan(&self.world, &self.scan, &config);
        let obs = compose_observation(
            &self.world.robot,
            self.world.goal,
            &self.region,
            Some(&refs),
            mpc_sol.as_ref(),
            config.rnum_v,
        );
        let stacked = self.history.push_and_stack(obs);

        self.trace.steps.push(TraceStep {
            t: self.t,
            state: self.world.robot,
            scan_min: self.scan.min_range(),
            region: self.region.vertices.clone(),
            action: raw,
            refs,
            q_star: mpc_sol.as_ref().map_or_else(Vec::new, |s| s.q_star.clone()),
            mpc_status,
            reward,
            termination,
            discs: self
                .world
                .discs
                .iter()
                .map(|d| (d.center.x, d.center.y, d.radius))
                .collect(),
        });
        self.trace.termination = termination;
        self.d_prev = d_now;
        self.prev_refs = Some(refs);
        self.prev_mpc = mpc_sol;
        self.done = done;
        self.world.steps = self.t;

        (stacked, reward, StepFlags { done, termination })
    }

    /// Jerk that drives acceleration toward braking the current velocity,
    /// clipped by the box limits. Used when the MPC reports failure.
    fn emergency_brake(&self) -> Jerk {
        let lim = self.config.mpc.limits;
        let t_c = self.config.mpc.t_c;
        let brake_axis = |v: f64, a: f64| {
            let a_des = (-v / t_c).clamp(-lim.a_max, lim.a_max);
            ((a_des - a) / t_c).clamp(-lim.j_max, lim.j_max)
        };
        Jerk::new(
            brake_axis(self.world.robot.vx, self.world.robot.ax),
            brake_axis(self.world.robot.vy, self.world.robot.ay),
        )
    }
}

/// Convert scan hits to a cloud (pulled inward by `inflate`) and build the
/// normalized convex region around the robot.
pub fn region_from_scan(world: &World, scan: &LidarScan, config: &EnvConfig) -> ConvexRegion {
    let origin = world.robot.position();
    let mut cloud = Vec::new();
    for (b, &range) in scan.ranges.iter().enumerate() {
        if range < scan.max_range - 1e-9 {
            let d = (range - config.inflate).max(0.01);
            let angle = scan.angle(b);
            cloud.push(origin + Point2::from_polar(d, angle));
        }
    }
    let region = build_convex_region(&cloud, origin, config.lidar_range, config.seed_sides);
    normalize_vertex_count(&region, config.rnum_v)
}
