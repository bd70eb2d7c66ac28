//! Quadratic-program MPC: track the short-term reference with the first
//! predicted position and the long-term reference with the last, penalize
//! jerk, optionally add a terminal stop cost, and keep every predicted
//! position inside the convex region while honoring per-axis box limits.
//!
//! Condensed formulation: states are eliminated through the exact discrete
//! dynamics, so the decision vector is just the 2N jerk components
//! (x jerks at even indices, y jerks at odd).

pub mod qp;

use crate::dynamics::{discretize, step, Jerk, Limits, RobotState};
use crate::geom::{point_in_convex, ConvexRegion, Point2};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use qp::{solve_qp, solve_qp_warm, QpSolution, QpStatus, QuadraticProgram};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MpcError {
    #[error("initial position lies outside the convex region")]
    StartOutsideRegion,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MpcParams {
    pub w_track: f64,
    pub w_smooth: f64,
    pub w_vend: f64,
    pub w_aend: f64,
    pub n: usize,
    pub t_c: f64,
    pub limits: Limits,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        MpcParams {
            w_track: 10.0,
            w_smooth: 0.01,
            w_vend: 5.0,
            w_aend: 5.0,
            n: 10,
            t_c: 0.2,
            limits: Limits::default(),
            max_iter: 4000,
            tol: 1e-6,
        }
    }
}

impl MpcParams {
    pub fn horizon_seconds(&self) -> f64 {
        self.n as f64 * self.t_c
    }
}

#[derive(Clone, Debug)]
pub struct MpcProblem {
    pub x_init: RobotState,
    pub q_short: Point2,
    pub q_long: Point2,
    pub region: ConvexRegion,
    pub goal_in_convex: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MpcStatus {
    Optimal,
    SoftFallback,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcSolution {
    pub u_star: Vec<Jerk>,
    pub predicted: Vec<RobotState>,
    pub q_star: Vec<Point2>,
    pub status: MpcStatus,
    pub objective: f64,
    pub iterations: usize,
}

impl MpcSolution {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("solution serialization cannot fail")
    }
}

/// Per-axis influence coefficients of jerk u_k on position/velocity/
/// acceleration at step i (1-based), from the closed-form powers of the
/// triple-integrator transition matrix.
struct Condensed {
    /// cp[i-1][k]: position at step i per unit jerk at step k (k < i)
    cp: Vec<Vec<f64>>,
    cv: Vec<Vec<f64>>,
    ca: Vec<Vec<f64>>,
    /// free response (no input) per axis: (p, v, a) at step i
    free_x: Vec<(f64, f64, f64)>,
    free_y: Vec<(f64, f64, f64)>,
}

fn condense(x0: &RobotState, n: usize, t: f64) -> Condensed {
    let mut cp = vec![vec![0.0; n]; n];
    let mut cv = vec![vec![0.0; n]; n];
    let mut ca = vec![vec![0.0; n]; n];
    for i in 1..=n {
        for k in 0..i {
            let m = (i - 1 - k) as f64;
            cp[i - 1][k] = t * t * t * (1.0 / 6.0 + 0.5 * m + 0.5 * m * m);
            cv[i - 1][k] = t * t * (0.5 + m);
            ca[i - 1][k] = t;
        }
    }
    let free = |p: f64, v: f64, a: f64| -> Vec<(f64, f64, f64)> {
        (1..=n)
            .map(|i| {
                let s = i as f64 * t;
                (p + s * v + 0.5 * s * s * a, v + s * a, a)
            })
            .collect()
    };
    Condensed {
        cp,
        cv,
        ca,
        free_x: free(x0.px, x0.vx, x0.ax),
        free_y: free(x0.py, x0.vy, x0.ay),
    }
}

/// Assemble the condensed QP over the 2N jerk variables. When
/// `soft_containment` is set, one nonnegative slack per containment row is
/// appended and penalized quadratically with weight `1e3 * w_track`.
pub fn assemble_qp(
    problem: &MpcProblem,
    params: &MpcParams,
    soft_containment: bool,
) -> QuadraticProgram {
    let n = params.n;
    let t = params.t_c;
    let cond = condense(&problem.x_init, n, t);
    let edges: Vec<_> = problem.region.half_planes().collect();
    let n_contain = n * edges.len();
    let n_slack = if soft_containment { n_contain } else { 0 };
    let nv = 2 * n + n_slack;

    let mut p = DMatrix::zeros(nv, nv);
    let mut q = DVector::zeros(nv);
    let mut offset = 0.0;

    // weight * (coeff' z + bias)^2 accumulated into 1/2 z'Pz + q'z + offset
    let add_quadratic = |p: &mut DMatrix<f64>,
                             q: &mut DVector<f64>,
                             offset: &mut f64,
                             terms: &[(usize, f64)],
                             bias: f64,
                             weight: f64| {
        for &(i, ci) in terms {
            for &(j, cj) in terms {
                p[(i, j)] += 2.0 * weight * ci * cj;
            }
            q[i] += 2.0 * weight * bias * ci;
        }
        *offset += weight * bias * bias;
    };

    // tracking: first predicted position to q_short, last to q_long
    for (step_idx, target) in [(0usize, problem.q_short), (n - 1, problem.q_long)] {
        let terms_x: Vec<(usize, f64)> = (0..n)
            .filter(|&k| cond.cp[step_idx][k] != 0.0)
            .map(|k| (2 * k, cond.cp[step_idx][k]))
            .collect();
        let terms_y: Vec<(usize, f64)> = terms_x.iter().map(|&(i, c)| (i + 1, c)).collect();
        add_quadratic(
            &mut p,
            &mut q,
            &mut offset,
            &terms_x,
            cond.free_x[step_idx].0 - target.x,
            params.w_track,
        );
        add_quadratic(
            &mut p,
            &mut q,
            &mut offset,
            &terms_y,
            cond.free_y[step_idx].0 - target.y,
            params.w_track,
        );
    }

    // smoothing: w_smooth * sum ||u_k||^2
    for k in 0..2 * n {
        p[(k, k)] += 2.0 * params.w_smooth;
    }

    // terminal stop cost, active only when the goal is inside the region
    if problem.goal_in_convex {
        let last = n - 1;
        for (weight, coeffs, free_x, free_y) in [
            (
                params.w_vend,
                &cond.cv[last],
                cond.free_x[last].1,
                cond.free_y[last].1,
            ),
            (
                params.w_aend,
                &cond.ca[last],
                cond.free_x[last].2,
                cond.free_y[last].2,
            ),
        ] {
            let terms_x: Vec<(usize, f64)> = (0..n)
                .filter(|&k| coeffs[k] != 0.0)
                .map(|k| (2 * k, coeffs[k]))
                .collect();
            let terms_y: Vec<(usize, f64)> = terms_x.iter().map(|&(i, c)| (i + 1, c)).collect();
            add_quadratic(&mut p, &mut q, &mut offset, &terms_x, free_x, weight);
            add_quadratic(&mut p, &mut q, &mut offset, &terms_y, free_y, weight);
        }
    }

    if soft_containment {
        let slack_weight = 1e3 * params.w_track;
        for s in 0..n_slack {
            p[(2 * n + s, 2 * n + s)] += 2.0 * slack_weight;
        }
    }

    // rows: containment (one per step per edge), then velocity, acceleration,
    // and jerk boxes (one two-sided row per step per axis each)
    let n_rows = n_contain + 3 * 2 * n + n_slack;
    let mut a = DMatrix::zeros(n_rows, nv);
    let mut l = DVector::from_element(n_rows, f64::NEG_INFINITY);
    let mut u = DVector::from_element(n_rows, f64::INFINITY);
    let mut row = 0;

    for i in 0..n {
        for (e, hp) in edges.iter().enumerate() {
            // normalize so residual tolerances are plain distances
            let len = hp.normal.norm().max(1e-15);
            let nx = hp.normal.x / len;
            let ny = hp.normal.y / len;
            let c = hp.offset / len;
            for k in 0..=i {
                a[(row, 2 * k)] = nx * cond.cp[i][k];
                a[(row, 2 * k + 1)] = ny * cond.cp[i][k];
            }
            if soft_containment {
                a[(row, 2 * n + i * edges.len() + e)] = -1.0;
            }
            u[row] = c - nx * cond.free_x[i].0 - ny * cond.free_y[i].0;
            row += 1;
        }
    }
    for i in 0..n {
        for axis in 0..2 {
            let free = if axis == 0 {
                cond.free_x[i].1
            } else {
                cond.free_y[i].1
            };
            for k in 0..=i {
                a[(row, 2 * k + axis)] = cond.cv[i][k];
            }
            l[row] = -params.limits.v_max - free;
            u[row] = params.limits.v_max - free;
            row += 1;
        }
    }
    for i in 0..n {
        for axis in 0..2 {
            let free = if axis == 0 {
                cond.free_x[i].2
            } else {
                cond.free_y[i].2
            };
            for k in 0..=i {
                a[(row, 2 * k + axis)] = cond.ca[i][k];
            }
            l[row] = -params.limits.a_max - free;
            u[row] = params.limits.a_max - free;
            row += 1;
        }
    }
    for k in 0..2 * n {
        a[(row, k)] = 1.0;
        l[row] = -params.limits.j_max;
        u[row] = params.limits.j_max;
        row += 1;
    }
    for s in 0..n_slack {
        a[(row, 2 * n + s)] = 1.0;
        l[row] = 0.0;
        row += 1;
    }
    debug_assert_eq!(row, n_rows);

    QuadraticProgram {
        p,
        q,
        a,
        l,
        u,
        offset,
    }
}

/// Solve the MPC program: hard containment first, soft-slack retry on
/// infeasibility, `Failed` (zero jerk) only when both passes fail.
pub fn solve_mpc(problem: &MpcProblem, params: &MpcParams) -> Result<MpcSolution, MpcError> {
    solve_mpc_warm(problem, params, None)
}

/// [`solve_mpc`] seeded with a jerk sequence, typically the previous control
/// period's solution shifted by one step.
pub fn solve_mpc_warm(
    problem: &MpcProblem,
    params: &MpcParams,
    warm: Option<&[Jerk]>,
) -> Result<MpcSolution, MpcError> {
    if !point_in_convex(&problem.region, problem.x_init.position()) {
        return Err(MpcError::StartOutsideRegion);
    }
    let warm_vec = |extra: usize| {
        warm.map(|u| {
            let mut x0 = DVector::zeros(2 * params.n + extra);
            for (k, jerk) in u.iter().take(params.n).enumerate() {
                x0[2 * k] = jerk.jx;
                x0[2 * k + 1] = jerk.jy;
            }
            x0
        })
    };
    let hard = assemble_qp(problem, params, false);
    let x0 = warm_vec(0);
    let sol = solve_qp_warm(&hard, params.max_iter, params.tol, x0.as_ref());
    if sol.status == QpStatus::Optimal {
        return Ok(build_solution(problem, params, &sol, MpcStatus::Optimal));
    }
    let soft = assemble_qp(problem, params, true);
    let x0 = warm_vec(soft.num_vars() - 2 * params.n);
    let sol = solve_qp_warm(&soft, params.max_iter, params.tol, x0.as_ref());
    if sol.status == QpStatus::Optimal {
        return Ok(build_solution(problem, params, &sol, MpcStatus::SoftFallback));
    }
    // the dual criterion can stall on ill-conditioned instances while the
    // iterate is already primal-feasible; a near-feasible plan is still far
    // safer than braking blind, so accept it under a widened tolerance
    if sol.status == QpStatus::MaxIterExceeded {
        let ax = &soft.a * &sol.x;
        let viol = (0..soft.num_rows())
            .map(|r| (ax[r] - ax[r].clamp(soft.l[r], soft.u[r])).abs())
            .fold(0.0_f64, f64::max);
        if viol <= 10.0 * params.tol {
            return Ok(build_solution(problem, params, &sol, MpcStatus::SoftFallback));
        }
    }
    // both passes failed: report zero jerk so the caller can apply its own
    // emergency policy
    let zero = QpSolution {
        x: DVector::zeros(2 * params.n),
        y: DVector::zeros(0),
        status: sol.status,
        iterations: sol.iterations,
        objective: f64::NAN,
        step_norm_segments: Vec::new(),
    };
    Ok(build_solution(problem, params, &zero, MpcStatus::Failed))
}

fn build_solution(
    problem: &MpcProblem,
    params: &MpcParams,
    sol: &QpSolution,
    status: MpcStatus,
) -> MpcSolution {
    let model = discretize(params.t_c).expect("t_c > 0 by MpcParams invariant");
    let u_star: Vec<Jerk> = (0..params.n)
        .map(|k| Jerk::new(sol.x[2 * k], sol.x[2 * k + 1]))
        .collect();
    let mut predicted = Vec::with_capacity(params.n);
    let mut state = problem.x_init;
    for &u in &u_star {
        state = step(&state, u, &model);
        predicted.push(state);
    }
    let q_star = predicted.iter().map(|s| s.position()).collect();
    MpcSolution {
        u_star,
        predicted,
        q_star,
        status,
        objective: sol.objective,
        iterations: sol.iterations,
    }
}
