//! Per-frame observation and the three-frame stacked state fed to the
//! policy and value networks.
//!
//! All point-valued fields are expressed in the robot-centered frame with
//! world-aligned axes, so the observation is invariant under translating the
//! whole scene. Raw (metric) values are stored; scaling to network range
//! happens only at the network boundary via [`ObsScales`].

use crate::actions::ReferencePoints;
use crate::dynamics::RobotState;
use crate::geom::{ConvexRegion, Point2};
use crate::mpc::MpcSolution;
use serde::{Deserialize, Serialize};

/// One observation frame: region vertices (robot-centered), goal distance,
/// speed, heading error, previous reference points, and the first/last
/// MPC-optimized points from the previous solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observation {
    pub convex: Vec<Point2>,
    pub d: f64,
    pub v: f64,
    pub dtheta: f64,
    pub q_short_prev: Point2,
    pub q_long_prev: Point2,
    pub q1_star: Point2,
    pub qn_star: Point2,
}

impl Observation {
    /// Flattened length: 2 * rnum_v + 11.
    pub fn dim(rnum_v: usize) -> usize {
        2 * rnum_v + 11
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for p in &self.convex {
            out.push(p.x);
            out.push(p.y);
        }
        out.push(self.d);
        out.push(self.v);
        out.push(self.dtheta);
        for p in [
            self.q_short_prev,
            self.q_long_prev,
            self.q1_star,
            self.qn_star,
        ] {
            out.push(p.x);
            out.push(p.y);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dim(self.convex.len()));
        self.flatten_into(&mut out);
        out
    }
}

/// Scales applied at the network boundary so inputs stay near [-1, 1].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ObsScales {
    pub lidar_range: f64,
    pub arena_diagonal: f64,
    pub v_max: f64,
}

impl ObsScales {
    /// Normalized flattened frame: positions / lidar range, distance /
    /// arena diagonal, speed / v_max, angle / pi.
    pub fn normalize_frame(&self, obs: &Observation, out: &mut Vec<f64>) {
        for p in &obs.convex {
            out.push(p.x / self.lidar_range);
            out.push(p.y / self.lidar_range);
        }
        out.push(obs.d / self.arena_diagonal);
        out.push(obs.v / self.v_max);
        out.push(obs.dtheta / std::f64::consts::PI);
        for p in [
            obs.q_short_prev,
            obs.q_long_prev,
            obs.q1_star,
            obs.qn_star,
        ] {
            out.push(p.x / self.lidar_range);
            out.push(p.y / self.lidar_range);
        }
    }
}

/// Stacked state of three consecutive frames (o_{t-2}, o_{t-1}, o_t).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackedState {
    pub frames: [Observation; 3],
}

impl StackedState {
    /// Flattened length: 6 * rnum_v + 33.
    pub fn dim(rnum_v: usize) -> usize {
        6 * rnum_v + 33
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dim(self.frames[0].convex.len()));
        for f in &self.frames {
            f.flatten_into(&mut out);
        }
        out
    }

    pub fn normalized(&self, scales: &ObsScales) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dim(self.frames[0].convex.len()));
        for f in &self.frames {
            scales.normalize_frame(f, &mut out);
        }
        out
    }
}

/// Compose the observation for the current step.
///
/// `region` must already be normalized to `rnum_v` vertices. `prev_refs` and
/// `prev_mpc` are the previous step's action and solve; `None` at the first
/// step, where the corresponding fields default to the robot position
/// (zero vectors in the robot frame).
pub fn compose_observation(
    robot: &RobotState,
    goal: Point2,
    region: &ConvexRegion,
    prev_refs: Option<&ReferencePoints>,
    prev_mpc: Option<&MpcSolution>,
    rnum_v: usize,
) -> Observation {
    assert_eq!(region.num_vertices(), rnum_v, "region not normalized");
    let pos = robot.position();
    let rel = |p: Point2| p - pos;
    let to_goal = goal - pos;
    let d = to_goal.norm();
    let v = robot.speed();
    let dtheta = if v < 1e-6 || d < 1e-12 {
        0.0
    } else {
        let vel = Point2::new(robot.vx, robot.vy);
        // signed angle from velocity direction to goal direction
        vel.cross(to_goal).atan2(vel.dot(to_goal))
    };
    let (q_short_prev, q_long_prev) = match prev_refs {
        Some(r) => (rel(r.q_short), rel(r.q_long)),
        None => (Point2::ZERO, Point2::ZERO),
    };
    let (q1_star, qn_star) = match prev_mpc {
        Some(m) if !m.q_star.is_empty() => {
            (rel(m.q_star[0]), rel(*m.q_star.last().unwrap()))
        }
        _ => (Point2::ZERO, Point2::ZERO),
    };
    Observation {
        convex: region.vertices.iter().map(|&p| rel(p)).collect(),
        d,
        v,
        dtheta,
        q_short_prev,
        q_long_prev,
        q1_star,
        qn_star,
    }
}

/// Ring buffer of recent frames; missing history at episode start is filled
/// by repeating the earliest available frame.
#[derive(Clone, Debug, Default)]
pub struct FrameHistory {
    frames: Vec<Observation>,
}

impl FrameHistory {
    pub fn new() -> Self {
        FrameHistory { frames: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.frames.clear();
    }

    pub fn push_and_stack(&mut self, o_t: Observation) -> StackedState {
        self.frames.push(o_t);
        if self.frames.len() > 3 {
            self.frames.remove(0);
        }
        let f = &self.frames;
        let pick = |i: isize| -> Observation {
            let idx = (f.len() as isize - 1 + i).max(0) as usize;
            f[idx].clone()
        };
        StackedState {
            frames: [pick(-2), pick(-1), pick(0)],
        }
    }
}
