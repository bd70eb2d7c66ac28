//! Deterministic 2D navigation stack built around convex obstacle-free regions.
//!
//! Pipeline per control period: raycast LiDAR scan -> convex region extracted
//! from the point cloud -> policy-selected short/long-term reference points
//! inside the region -> quadratic-program MPC that tracks the references while
//! keeping every predicted position inside the region and the kinodynamic box
//! limits. A curriculum PPO trainer and a benchmark harness sit on top.

pub mod actions;
pub mod dynamics;
pub mod env;
pub mod geom;
pub mod harness;
pub mod mpc;
pub mod obs;
pub mod ppo;
pub mod reward;

pub use geom::{ConvexRegion, Point2};
