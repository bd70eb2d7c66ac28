//! 2D third-order integrator (position, velocity, acceleration per axis,
//! jerk input) and its exact zero-order-hold discretization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DynamicsError {
    #[error("discretization step must be positive")]
    NonPositiveStep,
}

/// Point-mass state: position, velocity, acceleration on both axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl RobotState {
    pub fn at_rest(px: f64, py: f64) -> Self {
        RobotState {
            px,
            py,
            ..Default::default()
        }
    }

    pub fn position(&self) -> crate::geom::Point2 {
        crate::geom::Point2::new(self.px, self.py)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn accel_norm(&self) -> f64 {
        self.ax.hypot(self.ay)
    }
}

/// Jerk command per axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Jerk {
    pub jx: f64,
    pub jy: f64,
}

impl Jerk {
    pub fn new(jx: f64, jy: f64) -> Self {
        Jerk { jx, jy }
    }

    pub fn norm(&self) -> f64 {
        self.jx.hypot(self.jy)
    }
}

/// Per-axis box limits on velocity, acceleration, and jerk.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Limits {
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            v_max: 3.0,
            a_max: 3.0,
            j_max: 10.0,
        }
    }
}

/// Exact discrete-time model for step `t_c`: per-axis blocks
/// `F = [[1, t, t^2/2], [0, 1, t], [0, 0, 1]]`, `G = [t^3/6, t^2/2, t]`.
/// Axes are decoupled, so the per-axis 3x3 block is stored once.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiscreteModel {
    pub t_c: f64,
    pub f_block: [[f64; 3]; 3],
    pub g_block: [f64; 3],
}

/// Zero-order-hold discretization of the triple integrator.
pub fn discretize(t_c: f64) -> Result<DiscreteModel, DynamicsError> {
    if t_c <= 0.0 {
        return Err(DynamicsError::NonPositiveStep);
    }
    let t = t_c;
    Ok(DiscreteModel {
        t_c,
        f_block: [[1.0, t, 0.5 * t * t], [0.0, 1.0, t], [0.0, 0.0, 1.0]],
        g_block: [t * t * t / 6.0, 0.5 * t * t, t],
    })
}

/// One exact discrete step `x_next = F x + G u`. No clamping here; limits
/// are a simulator/MPC policy.
pub fn step(x: &RobotState, u: Jerk, model: &DiscreteModel) -> RobotState {
    let f = &model.f_block;
    let g = &model.g_block;
    let axis = |p: f64, v: f64, a: f64, j: f64| -> (f64, f64, f64) {
        (
            f[0][0] * p + f[0][1] * v + f[0][2] * a + g[0] * j,
            f[1][1] * v + f[1][2] * a + g[1] * j,
            f[2][2] * a + g[2] * j,
        )
    };
    let (px, vx, ax) = axis(x.px, x.vx, x.ax, u.jx);
    let (py, vy, ay) = axis(x.py, x.vy, x.ay, u.jy);
    RobotState {
        px,
        py,
        vx,
        vy,
        ax,
        ay,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_step_approaches_identity() {
        let m = discretize(1e-12).unwrap();
        assert!((m.f_block[0][0] - 1.0).abs() < 1e-15);
        assert!(m.f_block[0][1] < 1e-11);
        assert!(m.g_block[2] < 1e-11);
    }

    #[test]
    fn unit_step_closed_form() {
        let m = discretize(1.0).unwrap();
        assert_eq!(m.f_block, [[1.0, 1.0, 0.5], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]]);
        assert_eq!(m.g_block, [1.0 / 6.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert_eq!(discretize(0.0).unwrap_err(), DynamicsError::NonPositiveStep);
        assert_eq!(
            discretize(-0.1).unwrap_err(),
            DynamicsError::NonPositiveStep
        );
    }

    /// RK4 oracle for the continuous triple integrator with constant jerk.
    fn rk4_oracle(x: &RobotState, u: Jerk, t: f64, substeps: usize) -> RobotState {
        let h = t / substeps as f64;
        let mut s = [x.px, x.vx, x.ax, x.py, x.vy, x.ay];
        let deriv = |s: &[f64; 6]| [s[1], s[2], u.jx, s[4], s[5], u.jy];
        for _ in 0..substeps {
            let k1 = deriv(&s);
            let mut s2 = s;
            for i in 0..6 {
                s2[i] = s[i] + 0.5 * h * k1[i];
            }
            let k2 = deriv(&s2);
            let mut s3 = s;
            for i in 0..6 {
                s3[i] = s[i] + 0.5 * h * k2[i];
            }
            let k3 = deriv(&s3);
            let mut s4 = s;
            for i in 0..6 {
                s4[i] = s[i] + h * k3[i];
            }
            let k4 = deriv(&s4);
            for i in 0..6 {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        RobotState {
            px: s[0],
            vx: s[1],
            ax: s[2],
            py: s[3],
            vy: s[4],
            ay: s[5],
        }
    }

    #[test]
    fn discrete_step_matches_fine_ode_oracle() {
        let x = RobotState {
            px: 0.3,
            py: -1.2,
            vx: 1.1,
            vy: -0.4,
            ax: 0.7,
            ay: 2.0,
        };
        let u = Jerk::new(-3.0, 5.0);
        for &t_c in &[0.05, 0.1, 0.2, 0.5] {
            let model = discretize(t_c).unwrap();
            let got = step(&x, u, &model);
            let want = rk4_oracle(&x, u, t_c, 10_000);
            for (g, w) in [
                (got.px, want.px),
                (got.py, want.py),
                (got.vx, want.vx),
                (got.vy, want.vy),
                (got.ax, want.ax),
                (got.ay, want.ay),
            ] {
                assert!((g - w).abs() < 1e-8, "t_c={t_c}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn rest_with_zero_jerk_is_fixed_point() {
        let x = RobotState::at_rest(2.0, 3.0);
        let m = discretize(0.2).unwrap();
        assert_eq!(step(&x, Jerk::default(), &m), x);
    }

    #[test]
    fn unit_jerk_closed_form() {
        let x = RobotState::at_rest(0.0, 0.0);
        let m = discretize(1.0).unwrap();
        let next = step(&x, Jerk::new(6.0, 0.0), &m);
        assert!((next.px - 1.0).abs() < 1e-12);
        assert!((next.vx - 3.0).abs() < 1e-12);
        assert!((next.ax - 6.0).abs() < 1e-12);
        assert_eq!(next.py, 0.0);
    }

    #[test]
    fn constant_input_semigroup() {
        let x = RobotState {
            px: 1.0,
            py: 2.0,
            vx: -0.5,
            vy: 0.25,
            ax: 0.1,
            ay: -0.2,
        };
        let u = Jerk::new(0.7, -1.3);
        let half = discretize(0.1).unwrap();
        let full = discretize(0.2).unwrap();
        let two_steps = step(&step(&x, u, &half), u, &half);
        let one_step = step(&x, u, &full);
        assert!((two_steps.px - one_step.px).abs() < 1e-12);
        assert!((two_steps.vx - one_step.vx).abs() < 1e-12);
        assert!((two_steps.ax - one_step.ax).abs() < 1e-12);
        assert!((two_steps.py - one_step.py).abs() < 1e-12);
    }

    #[test]
    fn superposition_and_axis_decoupling() {
        let x1 = RobotState {
            px: 1.0,
            vx: 0.5,
            ax: -0.1,
            ..Default::default()
        };
        let x2 = RobotState {
            py: -2.0,
            vy: 1.5,
            ay: 0.3,
            ..Default::default()
        };
        let u1 = Jerk::new(1.0, 0.0);
        let u2 = Jerk::new(0.0, -2.0);
        let m = discretize(0.2).unwrap();
        let combined = RobotState {
            px: 2.0 * x1.px + 3.0 * x2.px,
            py: 2.0 * x1.py + 3.0 * x2.py,
            vx: 2.0 * x1.vx + 3.0 * x2.vx,
            vy: 2.0 * x1.vy + 3.0 * x2.vy,
            ax: 2.0 * x1.ax + 3.0 * x2.ax,
            ay: 2.0 * x1.ay + 3.0 * x2.ay,
        };
        let u_combined = Jerk::new(2.0 * u1.jx + 3.0 * u2.jx, 2.0 * u1.jy + 3.0 * u2.jy);
        let lhs = step(&combined, u_combined, &m);
        let a = step(&x1, u1, &m);
        let b = step(&x2, u2, &m);
        assert!((lhs.px - (2.0 * a.px + 3.0 * b.px)).abs() < 1e-12);
        assert!((lhs.vy - (2.0 * a.vy + 3.0 * b.vy)).abs() < 1e-12);
        // x-axis output of the x-only state never touches the y axis
        assert_eq!(a.py, 0.0);
        assert_eq!(a.vy, 0.0);
        assert_eq!(a.ay, 0.0);
    }
}
