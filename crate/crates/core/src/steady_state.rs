//! Steady-state volt-var objective, gradient, projected-gradient solver, and
//! an exhaustive box-QP oracle.
//!
//! The problem lives on the controllable buses: with `q` the stacked
//! controller injections, `X` the principal reactance block over those buses,
//! `C_q = diag(eta_i / s_bar_i)` and `dv = v_env - v_nom`,
//!
//! ```text
//! F(q) = 1/2 q' C_q q + 1/2 q' X q + q' dv,   q_lo <= q <= q_hi.
//! ```
//!
//! The gradient in closed loop reduces to per-bus local measurements:
//! `grad_i = C_q_i q_i + v_i - v_nom_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::Network;

/// Strictly convex box-constrained quadratic in the controller injections.
#[derive(Debug, Clone)]
pub struct SteadyStateProblem {
    /// Diagonal of the control cost Hessian, all entries positive.
    c_q: DVector<f64>,
    /// Reactance block over controllable buses.
    x_cc: DMatrix<f64>,
    /// Reactance columns of the controllable buses over all buses (n x m),
    /// used to reconstruct full voltage profiles.
    x_cols: DMatrix<f64>,
    /// `v_env - v_nom` restricted to controllable buses.
    delta_v_tilde: DVector<f64>,
    /// Full environment voltage (all buses).
    v_env: DVector<f64>,
    /// Nominal squared voltages at controllable buses.
    v_nom: DVector<f64>,
    q_lo: DVector<f64>,
    q_hi: DVector<f64>,
    /// Vector indices (bus id - 1) of the controllable buses.
    ctrl: Vec<usize>,
    n_buses: usize,
}

/// Solver output; `q_star` is indexed by controller slot, `v_star` by bus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub q_star: Vec<f64>,
    pub v_star: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Sup-norm of the projected-gradient fixed-point residual.
    pub residual: f64,
    pub converged: bool,
}

impl SteadyStateProblem {
    pub fn new(network: &Network, v_env: &DVector<f64>) -> Result<Self> {
        let n = network.n();
        if v_env.len() != n {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: v_env.len(),
            });
        }
        let ctrl: Vec<usize> = network.controllable().to_vec();
        let m = ctrl.len();
        if m == 0 {
            return Err(CoreError::Config("network has no controllable buses".into()));
        }
        let x = network.x_matrix();
        let mut x_cc = DMatrix::zeros(m, m);
        let mut x_cols = DMatrix::zeros(n, m);
        for (a, &i) in ctrl.iter().enumerate() {
            for (b, &j) in ctrl.iter().enumerate() {
                x_cc[(a, b)] = x[(i, j)];
            }
            for r in 0..n {
                x_cols[(r, a)] = x[(r, i)];
            }
        }
        let c_q = DVector::from_iterator(
            m,
            ctrl.iter().map(|&i| {
                let b = network.bus(i);
                b.eta / b.s_bar
            }),
        );
        let v_nom = DVector::from_iterator(m, ctrl.iter().map(|&i| network.bus(i).v_nom));
        let delta_v_tilde =
            DVector::from_iterator(m, ctrl.iter().map(|&i| v_env[i])) - &v_nom;
        let q_lo = DVector::from_iterator(m, ctrl.iter().map(|&i| network.bus(i).q_min));
        let q_hi = DVector::from_iterator(m, ctrl.iter().map(|&i| network.bus(i).q_max));
        for a in 0..m {
            if c_q[a] <= 0.0 {
                return Err(CoreError::InvariantViolation(format!(
                    "cost diagonal must be positive at controller {a}"
                )));
            }
            if q_lo[a] >= q_hi[a] {
                return Err(CoreError::InvariantViolation(format!(
                    "controller {a}: q_lo must be < q_hi"
                )));
            }
        }
        Ok(Self {
            c_q,
            x_cc,
            x_cols,
            delta_v_tilde,
            v_env: v_env.clone(),
            v_nom,
            q_lo,
            q_hi,
            ctrl,
            n_buses: n,
        })
    }

    /// Number of controller slots (the dimension of `q`).
    pub fn m(&self) -> usize {
        self.ctrl.len()
    }

    /// Number of buses in the underlying network.
    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn ctrl(&self) -> &[usize] {
        &self.ctrl
    }

    pub fn c_q(&self) -> &DVector<f64> {
        &self.c_q
    }

    pub fn x_cc(&self) -> &DMatrix<f64> {
        &self.x_cc
    }

    pub fn delta_v_tilde(&self) -> &DVector<f64> {
        &self.delta_v_tilde
    }

    pub fn v_env(&self) -> &DVector<f64> {
        &self.v_env
    }

    pub fn v_nom_ctrl(&self) -> &DVector<f64> {
        &self.v_nom
    }

    pub fn q_lo(&self) -> &DVector<f64> {
        &self.q_lo
    }

    pub fn q_hi(&self) -> &DVector<f64> {
        &self.q_hi
    }

    /// Embed a controller-slot vector into the full bus vector (zeros at
    /// uncontrolled buses).
    pub fn expand(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.n_buses);
        for (a, &i) in self.ctrl.iter().enumerate() {
            full[i] = q[a];
        }
        full
    }

    /// Restrict a full bus vector to the controller slots.
    pub fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.ctrl.len(), self.ctrl.iter().map(|&i| full[i]))
    }

    /// Full voltage profile at injection `q`: `v = X[:,C] q + v_env`.
    pub fn voltage_full(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.x_cols * q + &self.v_env
    }

    /// Clamp a controller-slot vector into the capacity box.
    pub fn clamp(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(q.len(), |i, _| q[i].clamp(self.q_lo[i], self.q_hi[i]))
    }
}

/// `F(q) = 1/2 q' C_q q + 1/2 q' X q + q' dv`.
pub fn objective(problem: &SteadyStateProblem, q: &DVector<f64>) -> Result<f64> {
    let m = problem.m();
    if q.len() != m {
        return Err(CoreError::DimensionMismatch {
            expected: m,
            got: q.len(),
        });
    }
    let quad_cost = 0.5 * q.component_mul(&problem.c_q).dot(q);
    let quad_net = 0.5 * (&problem.x_cc * q).dot(q);
    Ok(quad_cost + quad_net + q.dot(&problem.delta_v_tilde))
}

/// `grad_i = C_q_i q_i + v_i - v_nom_i` from local measurements; `v` is the
/// voltage at the controllable buses (caller guarantees consistency with `q`).
pub fn gradient(
    problem: &SteadyStateProblem,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = problem.m();
    if q.len() != m {
        return Err(CoreError::DimensionMismatch {
            expected: m,
            got: q.len(),
        });
    }
    if v.len() != m {
        return Err(CoreError::DimensionMismatch {
            expected: m,
            got: v.len(),
        });
    }
    Ok(DVector::from_fn(m, |i, _| {
        problem.c_q[i] * q[i] + v[i] - problem.v_nom[i]
    }))
}

/// Model-based gradient `C_q q + X q + dv`, equal to [`gradient`] when `v`
/// comes from the grid model.
pub fn gradient_model(problem: &SteadyStateProblem, q: &DVector<f64>) -> DVector<f64> {
    q.component_mul(&problem.c_q) + &problem.x_cc * q + &problem.delta_v_tilde
}

/// Largest admissible projected-gradient step: `2 / lambda_max(C_q + X)`.
pub fn step_size_bound(problem: &SteadyStateProblem) -> f64 {
    let mut h = problem.x_cc.clone();
    for i in 0..problem.m() {
        h[(i, i)] += problem.c_q[i];
    }
    let lmax = h
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    2.0 / lmax
}

/// Sup-norm of the projected-gradient fixed-point residual
/// `|| q - clamp(q - gamma * grad F(q)) ||_inf`; zero exactly at the optimum.
pub fn kkt_residual(problem: &SteadyStateProblem, q: &DVector<f64>, gamma: f64) -> f64 {
    let step = problem.clamp(&(q - gamma * gradient_model(problem, q)));
    (q - step).amax()
}

/// Projected-gradient iteration `q <- clamp(q - gamma * grad F(q))` until the
/// fixed-point residual drops below `tol`. On iteration exhaustion the best
/// iterate is returned with `converged = false`.
pub fn projected_gradient_solve(
    problem: &SteadyStateProblem,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    if gamma <= 0.0 || tol <= 0.0 {
        return Err(CoreError::Config(
            "projected gradient needs gamma > 0 and tol > 0".into(),
        ));
    }
    let mut q = DVector::zeros(problem.m());
    let mut iterations = 0;
    let mut residual = kkt_residual(problem, &q, gamma);
    while residual >= tol && iterations < max_iter {
        q = problem.clamp(&(&q - gamma * gradient_model(problem, &q)));
        iterations += 1;
        residual = kkt_residual(problem, &q, gamma);
    }
    let objective = objective(problem, &q)?;
    let v_star = problem.voltage_full(&q);
    Ok(SolveReport {
        q_star: q.iter().cloned().collect(),
        v_star: v_star.iter().cloned().collect(),
        objective,
        iterations,
        residual,
        converged: residual < tol,
    })
}

/// Default solver settings: `gamma = 0.9 * step_size_bound`, `tol = 1e-8`.
pub fn solve_default(problem: &SteadyStateProblem) -> Result<SolveReport> {
    projected_gradient_solve(problem, 0.9 * step_size_bound(problem), 1e-8, 100_000)
}

const QP_ORACLE_MAX: usize = 20;

/// Exact box-QP solution by exhaustive enumeration of per-coordinate statuses
/// (free, at lower, at upper): every feasible candidate lies in the box, so
/// the best feasible candidate is the global optimum. Exponential; limited to
/// small problems.
pub fn qp_oracle(problem: &SteadyStateProblem) -> Result<SolveReport> {
    let m = problem.m();
    if m > QP_ORACLE_MAX {
        return Err(CoreError::ProblemTooLarge {
            n: m,
            max: QP_ORACLE_MAX,
        });
    }
    let mut hess = problem.x_cc.clone();
    for i in 0..m {
        hess[(i, i)] += problem.c_q[i];
    }

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut status = vec![0u8; m]; // 0 = free, 1 = lower, 2 = upper
    let patterns = 3usize.pow(m as u32);
    for code in 0..patterns {
        let mut c = code;
        for s in status.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..m).filter(|&i| status[i] == 0).collect();
        let mut q = DVector::zeros(m);
        for i in 0..m {
            q[i] = match status[i] {
                1 => problem.q_lo[i],
                2 => problem.q_hi[i],
                _ => 0.0,
            };
        }
        if !free.is_empty() {
            // Solve hess[F,F] q_F = -(dv_F + hess[F,B] q_B).
            let k = free.len();
            let mut a = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = hess[(i, j)];
                }
                let mut b = problem.delta_v_tilde[i];
                for j in 0..m {
                    if status[j] != 0 {
                        b += hess[(i, j)] * q[j];
                    }
                }
                rhs[r] = -b;
            }
            let sol = match a.lu().solve(&rhs) {
                Some(s) => s,
                None => continue,
            };
            let mut feasible = true;
            for (r, &i) in free.iter().enumerate() {
                if sol[r] < problem.q_lo[i] || sol[r] > problem.q_hi[i] {
                    feasible = false;
                    break;
                }
                q[i] = sol[r];
            }
            if !feasible {
                continue;
            }
        }
        let f = objective(problem, &q)?;
        if best.as_ref().is_none_or(|(fb, _)| f < *fb) {
            best = Some((f, q));
        }
    }
    let (objective, q) = best.expect("the all-lower candidate is always feasible");
    let gamma = 0.9 * step_size_bound(problem);
    let residual = kkt_residual(problem, &q, gamma);
    let v_star = problem.voltage_full(&q);
    Ok(SolveReport {
        q_star: q.iter().cloned().collect(),
        v_star: v_star.iter().cloned().collect(),
        objective,
        iterations: patterns,
        residual,
        converged: true,
    })
}
