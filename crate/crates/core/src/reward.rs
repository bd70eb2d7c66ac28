//! Composite step reward: success bonus, obstacle-proximity penalty,
//! approach shaping, reference-feasibility penalty, reference-change
//! penalty, and a fixed per-step penalty. The four named variants toggle
//! the change and feasibility terms.
//!
//! Note on the approach term: the shaping is computed as
//! `w_approach * (d_prev - d_now)` so that getting closer to the goal is
//! rewarded with a positive `w_approach`.

use crate::geom::Point2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_success: f64,
    pub r_collision: f64,
    pub r_obs: f64,
    pub w_obs: f64,
    pub w_approach: f64,
    pub w_feasible_s: f64,
    pub w_feasible_l: f64,
    pub w_change_s: f64,
    pub w_change_l: f64,
    pub r_step: f64,
    pub d_th: f64,
    pub enable_c: bool,
    pub enable_f: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            r_success: 20.0,
            r_collision: -20.0,
            r_obs: -2.0,
            w_obs: 2.0,
            w_approach: 2.0,
            w_feasible_s: -0.5,
            w_feasible_l: -0.5,
            w_change_s: -0.5,
            w_change_l: -0.5,
            r_step: -0.05,
            d_th: 0.5,
            enable_c: true,
            enable_f: true,
        }
    }
}

/// Reward variants used in the ablation configurations: `Rt1` enables all
/// terms, `Rt2` drops the change penalty, `Rt3` drops the feasibility
/// penalty, `Rt4` drops both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardVariant {
    Rt1,
    Rt2,
    Rt3,
    Rt4,
}

impl std::str::FromStr for RewardVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rt1" => Ok(RewardVariant::Rt1),
            "rt2" => Ok(RewardVariant::Rt2),
            "rt3" => Ok(RewardVariant::Rt3),
            "rt4" => Ok(RewardVariant::Rt4),
            other => Err(format!("unknown reward variant `{other}`")),
        }
    }
}

pub fn select_config(variant: RewardVariant) -> RewardConfig {
    let (enable_c, enable_f) = match variant {
        RewardVariant::Rt1 => (true, true),
        RewardVariant::Rt2 => (false, true),
        RewardVariant::Rt3 => (true, false),
        RewardVariant::Rt4 => (false, false),
    };
    RewardConfig {
        enable_c,
        enable_f,
        ..Default::default()
    }
}

/// Everything the reward needs about one step. `clearance` is the minimum
/// LiDAR beam distance with the robot radius already subtracted, so zero or
/// below means contact. `t` is the 1-based step index inside the episode.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub t: usize,
    pub d_now: f64,
    pub d_prev: f64,
    pub clearance: f64,
    pub q_short: Point2,
    pub q_long: Point2,
    pub q_short_prev: Point2,
    pub q_long_prev: Point2,
    pub q1_star: Point2,
    pub qn_star: Point2,
}

/// Per-term reward breakdown; `total` is the sum with disabled terms at 0.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub e: f64,
    pub s: f64,
    pub a: f64,
    pub o: f64,
    pub c: f64,
    pub f: f64,
    pub total: f64,
}

pub fn compute_reward(ctx: &StepContext, config: &RewardConfig) -> RewardBreakdown {
    let s = if ctx.d_now < config.d_th {
        config.r_success
    } else {
        0.0
    };
    let o = if ctx.clearance <= 0.0 {
        config.r_collision
    } else if ctx.clearance <= 2.0 {
        config.r_obs * (-config.w_obs * ctx.clearance).exp()
    } else {
        0.0
    };
    let a = if ctx.t == 1 {
        0.0
    } else {
        config.w_approach * (ctx.d_prev - ctx.d_now)
    };
    let f = if config.enable_f {
        let ds = ctx.q_short.distance(ctx.q1_star);
        let dl = ctx.q_long.distance(ctx.qn_star);
        config.w_feasible_s * ds * ds + config.w_feasible_l * dl * dl
    } else {
        0.0
    };
    let c = if config.enable_c && ctx.t > 1 {
        let ds = ctx.q_short.distance(ctx.q_short_prev);
        let dl = ctx.q_long.distance(ctx.q_long_prev);
        config.w_change_s * ds * ds + config.w_change_l * dl * dl
    } else {
        0.0
    };
    let e = config.r_step;
    RewardBreakdown {
        e,
        s,
        a,
        o,
        c,
        f,
        total: e + s + a + o + c + f,
    }
}
