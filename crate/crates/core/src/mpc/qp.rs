//! Dense operator-splitting solver for quadratic programs in the form
//!
//!   minimize   1/2 x'Px + q'x
//!   subject to l <= Ax <= u
//!
//! with P positive semidefinite. ADMM iteration with a penalty parameter
//! that starts at 1.0 and is rebalanced from the primal/dual residual ratio
//! (with refactorization) when the two drift apart. Deterministic for fixed
//! inputs. Problems here are tiny (tens of variables, a few hundred rows),
//! so everything is dense.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    MaxIterExceeded,
}

#[derive(Clone, Debug)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    /// Constant objective offset, carried so reported objectives match the
    /// original cost expression.
    pub offset: f64,
}

impl QuadraticProgram {
    pub fn num_vars(&self) -> usize {
        self.p.nrows()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x) + self.offset
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    /// Norms of successive splitting-iterate differences, segmented at every
    /// penalty rebalance (the Douglas-Rachford iterate is nonexpansive only
    /// while the penalty is constant, so monotonicity holds per segment).
    pub step_norm_segments: Vec<Vec<f64>>,
}

const SIGMA: f64 = 1e-6;
const RHO_INIT: f64 = 1.0;
const EPS_INFEAS: f64 = 1e-6;
const CHECK_EVERY: usize = 25;

/// Solve the QP. Converged when the primal residual `||Ax - z||_inf` falls
/// below `tol` (absolute, rows are assembled at distance scale) and the dual
/// residual `||Px + q + A'y||_inf` falls below `tol * (1 + scale)`. Primal
/// infeasibility is detected from the dual-update certificate.
pub fn solve_qp(qp: &QuadraticProgram, max_iter: usize, tol: f64) -> QpSolution {
    solve_qp_warm(qp, max_iter, tol, None)
}

/// [`solve_qp`] with an optional primal warm start. In receding-horizon use
/// the previous solution shifted by one step sits close to the new optimum,
/// which cuts iteration counts dramatically on hard instances.
pub fn solve_qp_warm(
    qp: &QuadraticProgram,
    max_iter: usize,
    tol: f64,
    x_init: Option<&DVector<f64>>,
) -> QpSolution {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let at = qp.a.transpose();
    let ata = &at * &qp.a;
    let mut rho = RHO_INIT;
    let factor = |rho: f64| {
        Cholesky::new(&qp.p + DMatrix::identity(n, n) * SIGMA + &ata * rho)
            .expect("P + sigma I + rho A'A must be positive definite")
    };
    let mut chol = factor(rho);

    let mut x = match x_init {
        Some(x0) => {
            assert_eq!(x0.len(), n, "warm start dimension mismatch");
            x0.clone()
        }
        None => DVector::zeros(n),
    };
    let mut z = if x_init.is_some() {
        let ax = &qp.a * &x;
        DVector::from_fn(m, |i, _| ax[i].clamp(qp.l[i], qp.u[i]))
    } else {
        DVector::zeros(m)
    };
    let mut y = DVector::zeros(m);
    let mut segments: Vec<Vec<f64>> = vec![Vec::new()];
    let mut status = QpStatus::MaxIterExceeded;
    let mut iterations = max_iter;

    for iter in 0..max_iter {
        let rhs = &x * SIGMA - &qp.q + &at * (&z * rho - &y);
        x = chol.solve(&rhs);
        let ax = &qp.a * &x;
        let mut step_sq = 0.0;
        let mut delta_y = DVector::zeros(m);
        for i in 0..m {
            let v_prev = z[i] + y[i] / rho;
            let zi = (ax[i] + y[i] / rho).clamp(qp.l[i], qp.u[i]);
            let dy = rho * (ax[i] - zi);
            let v_next = zi + (y[i] + dy) / rho;
            step_sq += (v_next - v_prev) * (v_next - v_prev);
            delta_y[i] = dy;
            z[i] = zi;
            y[i] += dy;
        }
        segments.last_mut().unwrap().push(step_sq.sqrt());

        if (iter + 1) % CHECK_EVERY == 0 || iter == max_iter - 1 {
            let ax = &qp.a * &x;
            let r_prim = (0..m)
                .map(|i| (ax[i] - z[i]).abs())
                .fold(0.0_f64, f64::max);
            let px = &qp.p * &x;
            let aty = &at * &y;
            let dual_vec = &px + &qp.q + &aty;
            let r_dual = dual_vec.amax();
            let dual_scale = px.amax().max(qp.q.amax()).max(aty.amax());
            if r_prim <= tol && r_dual <= tol * (1.0 + dual_scale) {
                status = QpStatus::Optimal;
                iterations = iter + 1;
                break;
            }
            if primal_infeasibility_certificate(qp, &at, &delta_y) {
                status = QpStatus::PrimalInfeasible;
                iterations = iter + 1;
                break;
            }
            // rebalance the penalty when the residuals drift apart
            let prim_rel = r_prim / (1.0 + ax.amax().max(z.amax()));
            let dual_rel = r_dual / (1.0 + dual_scale);
            if prim_rel > 10.0 * dual_rel || dual_rel > 10.0 * prim_rel {
                let new_rho = (rho * (prim_rel / dual_rel).sqrt()).clamp(1e-6, 1e6);
                if (new_rho / rho - 1.0).abs() > 1e-9 {
                    rho = new_rho;
                    chol = factor(rho);
                    segments.push(Vec::new());
                }
            }
        }
    }

    // On a non-optimal exit, attempt a direct active-set polish: splitting
    // iterations can stall far from feasibility on badly scaled active
    // constraints even though the dual iterate already identifies the active
    // set. Solving the equality-constrained KKT system on that active set
    // recovers the exact solution in one factorization.
    if status != QpStatus::Optimal {
        if let Some((px_, py_)) = polish(qp, &at, &y, tol) {
            x = px_;
            y = py_;
            status = QpStatus::Optimal;
        }
    }

    let objective = qp.objective(&x);
    QpSolution {
        x,
        y,
        status,
        iterations,
        objective,
        step_norm_segments: segments,
    }
}

/// Solve the KKT system restricted to the active set guessed from the signs
/// of the dual iterate, with light regularization plus iterative refinement.
/// Returns the polished primal/dual pair only if it satisfies the solver's
/// own optimality criteria on the full problem.
fn polish(
    qp: &QuadraticProgram,
    at: &DMatrix<f64>,
    y: &DVector<f64>,
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.num_vars();
    let m = qp.num_rows();
    let active: Vec<(usize, f64)> = (0..m)
        .filter_map(|i| {
            if y[i] < 0.0 && qp.l[i].is_finite() {
                Some((i, qp.l[i]))
            } else if y[i] > 0.0 && qp.u[i].is_finite() {
                Some((i, qp.u[i]))
            } else {
                None
            }
        })
        .collect();
    let k = active.len();
    let dim = n + k;
    const REG: f64 = 1e-9;

    let mut kkt = DMatrix::zeros(dim, dim);
    let mut kkt_reg = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
    for (r, &(row, bound)) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = qp.a[(row, c)];
            kkt[(c, n + r)] = qp.a[(row, c)];
        }
        rhs[n + r] = bound;
    }
    for i in 0..n {
        rhs[i] = -qp.q[i];
    }
    kkt_reg.copy_from(&kkt);
    for i in 0..n {
        kkt_reg[(i, i)] += REG;
    }
    for i in n..dim {
        kkt_reg[(i, i)] -= REG;
    }
    let lu = kkt_reg.full_piv_lu();
    let mut sol = lu.solve(&rhs)?;
    // iterative refinement against the unregularized system
    for _ in 0..3 {
        let resid = &rhs - &kkt * &sol;
        let delta = lu.solve(&resid)?;
        sol += delta;
    }

    let x = DVector::from_fn(n, |i, _| sol[i]);
    let mut y_pol = DVector::zeros(m);
    for (r, &(row, _)) in active.iter().enumerate() {
        y_pol[row] = sol[n + r];
    }

    let ax = &qp.a * &x;
    let r_prim = (0..m)
        .map(|i| (ax[i] - ax[i].clamp(qp.l[i], qp.u[i])).abs())
        .fold(0.0_f64, f64::max);
    let px = &qp.p * &x;
    let aty = at * &y_pol;
    let r_dual = (&px + &qp.q + &aty).amax();
    let dual_scale = px.amax().max(qp.q.amax()).max(aty.amax());
    if r_prim <= tol && r_dual <= tol * (1.0 + dual_scale) {
        Some((x, y_pol))
    } else {
        None
    }
}

fn primal_infeasibility_certificate(
    qp: &QuadraticProgram,
    at: &DMatrix<f64>,
    delta_y: &DVector<f64>,
) -> bool {
    let dy_norm = delta_y.amax();
    if dy_norm <= 1e-14 {
        return false;
    }
    let at_dy = at * delta_y;
    if at_dy.amax() > EPS_INFEAS * dy_norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..delta_y.len() {
        let dy = delta_y[i];
        if dy > 0.0 {
            if qp.u[i].is_infinite() {
                return false;
            }
            support += qp.u[i] * dy;
        } else if dy < 0.0 {
            if qp.l[i].is_infinite() {
                return false;
            }
            support += qp.l[i] * dy;
        }
    }
    support < -EPS_INFEAS * dy_norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn no_constraints(n: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    #[test]
    fn unconstrained_projection_onto_point() {
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let (a, l, u) = no_constraints(3);
        let qp = QuadraticProgram {
            p: DMatrix::identity(3, 3) * 2.0,
            q: &c * -2.0,
            a,
            l,
            u,
            offset: c.dot(&c),
        };
        let sol = solve_qp(&qp, 4000, 1e-9);
        assert_eq!(sol.status, QpStatus::Optimal);
        for i in 0..3 {
            assert!((sol.x[i] - c[i]).abs() < 1e-8);
        }
        assert!(sol.objective.abs() < 1e-9);
    }

    /// Projected-gradient oracle for box-constrained QPs, run to convergence.
    fn projected_gradient(
        p: &DMatrix<f64>,
        q: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> DVector<f64> {
        let n = q.len();
        // step 1/L with L an upper bound on the largest eigenvalue
        let l_bound: f64 = (0..n)
            .map(|i| (0..n).map(|j| p[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
            .max(1e-9);
        let eta = 1.0 / l_bound;
        let mut x = DVector::zeros(n);
        for _ in 0..200_000 {
            let grad = p * &x + q;
            let mut next = &x - &grad * eta;
            for i in 0..n {
                next[i] = next[i].clamp(lo[i], hi[i]);
            }
            if (&next - &x).amax() < 1e-13 {
                x = next;
                break;
            }
            x = next;
        }
        x
    }

    #[test]
    fn random_box_qps_match_projected_gradient_oracle() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..100 {
            let n = 6;
            let m_rand = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let p = &m_rand.transpose() * &m_rand + DMatrix::identity(n, n) * 0.1;
            let q = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let lo = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..-0.1));
            let hi = DVector::from_fn(n, |_, _| rng.gen_range(0.1..2.0));
            let qp = QuadraticProgram {
                p: p.clone(),
                q: q.clone(),
                a: DMatrix::identity(n, n),
                l: lo.clone(),
                u: hi.clone(),
                offset: 0.0,
            };
            let sol = solve_qp(&qp, 8000, 1e-8);
            assert_eq!(sol.status, QpStatus::Optimal);
            let oracle = projected_gradient(&p, &q, &lo, &hi);
            let obj_oracle =
                0.5 * (oracle.transpose() * &p * &oracle)[(0, 0)] + q.dot(&oracle);
            assert!(
                (sol.objective - obj_oracle).abs() < 1e-5,
                "objective {} vs oracle {obj_oracle}",
                sol.objective
            );
        }
    }

    #[test]
    fn detects_infeasible_constraint_pair() {
        // z <= 0 and z >= 1 on the same scalar variable
        let qp = QuadraticProgram {
            p: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            l: DVector::from_vec(vec![f64::NEG_INFINITY, 1.0]),
            u: DVector::from_vec(vec![0.0, f64::INFINITY]),
            offset: 0.0,
        };
        let sol = solve_qp(&qp, 4000, 1e-6);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn splitting_step_norms_non_increasing_per_segment() {
        let mut rng = StdRng::seed_from_u64(5);
        let n = 8;
        let m_rand = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let p = &m_rand.transpose() * &m_rand + DMatrix::identity(n, n) * 0.5;
        let qp = QuadraticProgram {
            p,
            q: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
            a: DMatrix::identity(n, n),
            l: DVector::from_element(n, -1.0),
            u: DVector::from_element(n, 1.0),
            offset: 0.0,
        };
        let sol = solve_qp(&qp, 2000, 1e-10);
        assert_eq!(sol.status, QpStatus::Optimal);
        for segment in &sol.step_norm_segments {
            for w in segment.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12,
                    "step norm increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_inputs() {
        let qp = QuadraticProgram {
            p: DMatrix::identity(4, 4) * 3.0,
            q: DVector::from_vec(vec![1.0, -2.0, 0.5, 4.0]),
            a: DMatrix::identity(4, 4),
            l: DVector::from_element(4, -1.0),
            u: DVector::from_element(4, 1.0),
            offset: 0.0,
        };
        let a = solve_qp(&qp, 4000, 1e-8);
        let b = solve_qp(&qp, 4000, 1e-8);
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
    }
}
