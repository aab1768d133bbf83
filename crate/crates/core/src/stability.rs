//! Numerical certification of the closed-loop stability hypotheses.
//!
//! Three checks run over sampled states:
//!
//! * the singular-value condition `2 sigma_max(K(v)) <= sigma_min(C_q X^-1 + I)`,
//!   where `K(v)` collects the per-bus policy secant slopes through the
//!   optimal voltage;
//! * the inner-product inequality `||grad F||^2 + 2 <pi, -grad F> >= 0` on
//!   model-consistent states (it is the condition's consequence there);
//! * monotone decrease of `F` along closed-loop trajectories, up to the
//!   per-step Euler remainder `0.5 * L_F * h^2 * ||xi||^2` with
//!   `L_F = lambda_max(C_q + X)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, ControllerVariant};
use crate::error::{CoreError, Result};
use crate::grid::Network;
use crate::policy::{policy_eval_vector, PolicyParams};
use crate::sim::{self, ScenarioKind, Trajectory};
use crate::steady_state::{self, SteadyStateProblem};

/// Aggregate verification outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    /// States checked against the singular-value condition.
    pub n_samples: usize,
    pub condition_violations: usize,
    /// Min over samples of `sigma_min(C_q X^-1 + I) - 2 sigma_max(K(v))`.
    pub worst_margin: f64,
    pub inequality_violations: usize,
    pub lyapunov_violations: usize,
    pub max_lyapunov_increase: f64,
    /// Scenarios skipped because the optimal voltage left the deadband
    /// (the stability hypotheses do not apply there).
    pub degenerate_scenarios: usize,
}

impl CertificateReport {
    pub fn clean(&self) -> bool {
        self.condition_violations == 0
            && self.inequality_violations == 0
            && self.lyapunov_violations == 0
    }
}

/// Per-bus secant slopes of the policy through `(v_star, 0)`, stacked as the
/// diagonal of `K = -diag((pi_i(v_i) - pi_i(v_i*)) / (v_i - v_i*))`.
///
/// Entries are returned for the controller slots; monotone decrease plus the
/// in-band zero of `pi` make every stored entry nonnegative. Fails with
/// `DegenerateReference` when `v_star` leaves the deadband at a controller.
pub fn policy_slope_matrix(
    policy: &PolicyParams,
    network: &Network,
    alpha: f64,
    v: &DVector<f64>,
    v_star: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    let ctrl = network.controllable();
    let pi = policy_eval_vector(policy, network, alpha, v, q)?;
    let mut k = DVector::zeros(ctrl.len());
    for (slot, &i) in ctrl.iter().enumerate() {
        let bus = network.bus(i);
        if v_star[i] < bus.v_lo - 1e-12 || v_star[i] > bus.v_hi + 1e-12 {
            return Err(CoreError::DegenerateReference {
                index: i,
                v_star: v_star[i],
            });
        }
        if v[i] != v_star[i] {
            // pi(v_star) = 0 on the deadband
            k[slot] = -(pi[i] / (v[i] - v_star[i]));
        }
    }
    Ok(k)
}

/// `A = C_q X^-1 + I` over the controller block.
pub fn condition_matrix(problem: &SteadyStateProblem) -> Result<DMatrix<f64>> {
    let m = problem.m();
    let x_inv = problem
        .x_cc()
        .clone()
        .lu()
        .try_inverse()
        .ok_or(CoreError::SingularX)?;
    let mut a = x_inv;
    for r in 0..m {
        for c in 0..m {
            a[(r, c)] *= problem.c_q()[r];
        }
    }
    for i in 0..m {
        a[(i, i)] += 1.0;
    }
    Ok(a)
}

/// Smallest singular value of `C_q X^-1 + I`.
pub fn sigma_min_condition(problem: &SteadyStateProblem) -> Result<f64> {
    let a = condition_matrix(problem)?;
    let svd = a.svd(false, false);
    Ok(svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min))
}

/// Margin of the singular-value condition at one state; `holds` iff the
/// margin is nonnegative. `sigma_min_a` comes from [`sigma_min_condition`]
/// (state-independent, so callers hoist it out of sampling loops).
pub fn check_stability_condition(sigma_min_a: f64, k_diag: &DVector<f64>) -> (bool, f64) {
    let sigma_max_k = k_diag.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
    let margin = sigma_min_a - 2.0 * sigma_max_k;
    (margin >= 0.0, margin)
}

/// Left-hand side of the inner-product inequality
/// `||-grad F(q)||^2 + 2 <pi(v), -grad F(q)>` at a full bus state.
pub fn descent_inequality_lhs(
    problem: &SteadyStateProblem,
    network: &Network,
    policy: &PolicyParams,
    alpha: f64,
    v: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<f64> {
    let q_red = problem.restrict(q);
    let v_red = problem.restrict(v);
    let grad = steady_state::gradient(problem, &q_red, &v_red)?;
    let pi = problem.restrict(&policy_eval_vector(policy, network, alpha, v, q)?);
    Ok(grad.norm_squared() + 2.0 * pi.dot(&(-&grad)))
}

/// `lambda_max(C_q + X)`, the gradient Lipschitz constant of `F`.
pub fn lipschitz_f(problem: &SteadyStateProblem) -> f64 {
    let mut h = problem.x_cc().clone();
    for i in 0..problem.m() {
        h[(i, i)] += problem.c_q()[i];
    }
    h.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Count steps where `F` increases beyond the per-step Euler remainder
/// `0.5 * L_F * h^2 * ||xi_t||^2`. Returns the count and the largest
/// tolerance-exceeding increase (0 if none).
pub fn lyapunov_monitor(
    trajectory: &Trajectory,
    problem: &SteadyStateProblem,
) -> Result<(usize, f64)> {
    let l_f = lipschitz_f(problem);
    let h = trajectory.h;
    let mut violations = 0;
    let mut max_increase = 0.0f64;
    for t in 0..trajectory.times.len().saturating_sub(1) {
        let f_t = steady_state::objective(problem, &problem.restrict(&trajectory.q[t]))?;
        let f_next =
            steady_state::objective(problem, &problem.restrict(&trajectory.q[t + 1]))?;
        let xi = problem.restrict(&trajectory.xi[t]);
        let tol = 0.5 * l_f * h * h * xi.norm_squared();
        let increase = f_next - f_t;
        if increase > tol + 1e-15 {
            violations += 1;
            max_increase = max_increase.max(increase - tol);
        }
    }
    Ok((violations, max_increase))
}

/// Sampling protocol settings for [`certify`].
#[derive(Debug, Clone)]
pub struct CertifyConfig {
    pub trajectories: usize,
    pub steps: usize,
    /// Uniform state draws per scenario in addition to trajectory states.
    pub uniform_draws: usize,
    pub alpha: f64,
    pub h: f64,
    pub magnitude_range: (f64, f64),
    pub seed: u64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            trajectories: 1000,
            steps: 500,
            uniform_draws: 5,
            alpha: 0.5,
            h: 1.0,
            magnitude_range: (0.05, 0.15),
            seed: 0,
        }
    }
}

/// Run the full sampling protocol: random disturbance scenarios, closed-loop
/// trajectories under the policy, uniform box draws, and the three checks.
pub fn certify(
    network: &Network,
    policy: &PolicyParams,
    config: &CertifyConfig,
) -> Result<CertificateReport> {
    let controller = Controller::new(
        &ControllerConfig::new(
            config.alpha,
            config.h,
            ControllerVariant::Tasrl,
            Some(policy.clone()),
        )?,
        network,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = CertificateReport {
        n_samples: 0,
        condition_violations: 0,
        worst_margin: f64::INFINITY,
        inequality_violations: 0,
        lyapunov_violations: 0,
        max_lyapunov_increase: 0.0,
        degenerate_scenarios: 0,
    };

    let half = config.trajectories / 2;
    let mut scenarios = sim::generate_scenarios(
        network,
        ScenarioKind::HighVoltage,
        config.magnitude_range,
        half,
        config.seed,
        config.steps,
    )?;
    scenarios.extend(sim::generate_scenarios(
        network,
        ScenarioKind::LowVoltage,
        config.magnitude_range,
        config.trajectories - half,
        config.seed.wrapping_add(1),
        config.steps,
    )?);

    let mut sigma_min_a = None;
    for sc in &scenarios {
        let problem = SteadyStateProblem::new(network, &sc.v_env_vector())?;
        let sigma = match sigma_min_a {
            Some(s) => s,
            None => {
                let s = sigma_min_condition(&problem)?;
                sigma_min_a = Some(s);
                s
            }
        };
        let opt = steady_state::solve_default(&problem)?;
        let v_star = DVector::from_vec(opt.v_star.clone());
        let degenerate = problem.ctrl().iter().any(|&i| {
            let b = network.bus(i);
            v_star[i] < b.v_lo - 1e-12 || v_star[i] > b.v_hi + 1e-12
        });
        if degenerate {
            report.degenerate_scenarios += 1;
            continue;
        }

        let check_state = |report: &mut CertificateReport,
                               v: &DVector<f64>,
                               q: &DVector<f64>,
                               consistent: bool|
         -> Result<()> {
            let k = policy_slope_matrix(policy, network, config.alpha, v, &v_star, q)?;
            let (holds, margin) = check_stability_condition(sigma, &k);
            report.n_samples += 1;
            report.worst_margin = report.worst_margin.min(margin);
            if !holds {
                report.condition_violations += 1;
            }
            if consistent && holds {
                let lhs = descent_inequality_lhs(&problem, network, policy, config.alpha, v, q)?;
                if lhs < -1e-10 {
                    report.inequality_violations += 1;
                }
            }
            Ok(())
        };

        let (traj, _) = sim::run_episode(&controller, &problem, network, sc, 0.99)?;
        for t in 0..traj.times.len() {
            check_state(&mut report, &traj.v[t], &traj.q[t], true)?;
        }
        let (violations, max_inc) = lyapunov_monitor(&traj, &problem)?;
        report.lyapunov_violations += violations;
        report.max_lyapunov_increase = report.max_lyapunov_increase.max(max_inc);

        for _ in 0..config.uniform_draws {
            // consistent draw: q uniform in the box, v from the model
            let q_red = DVector::from_fn(problem.m(), |i, _| {
                rng.gen_range(problem.q_lo()[i]..problem.q_hi()[i])
            });
            let q = problem.expand(&q_red);
            let v = problem.voltage_full(&q_red);
            check_state(&mut report, &v, &q, true)?;

            // free draw over the +/-15% voltage box: condition check only
            let v_free = DVector::from_fn(network.n(), |i, _| {
                network.bus(i).v_nom * rng.gen_range(0.85..1.15)
            });
            let q_red = DVector::from_fn(problem.m(), |i, _| {
                rng.gen_range(problem.q_lo()[i]..problem.q_hi()[i])
            });
            check_state(&mut report, &v_free, &problem.expand(&q_red), false)?;
        }
    }
    if report.n_samples == 0 {
        report.worst_margin = 0.0;
    }
    Ok(report)
}
