//! Discrete-time closed-loop simulation and episode metrics.
//!
//! One step executes `q(t+1) = q(t) + h * xi(t)` with `xi` from the safe
//! controller and `v(t+1) = X q(t+1) + v_env`. Capacity-box membership is
//! exact along every trajectory (the rate clamp plus `h * alpha <= 1` make
//! the Euler update invariant; a last-ulp guard absorbs boundary rounding).

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::error::{CoreError, Result};
use crate::grid::Network;
use crate::steady_state::{self, SteadyStateProblem};

/// Disturbance specification: environment voltage, initial injections,
/// episode length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub v_env: Vec<f64>,
    pub q0: Vec<f64>,
    pub horizon: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self, network: &Network) -> Result<()> {
        let n = network.n();
        if self.v_env.len() != n {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: self.v_env.len(),
            });
        }
        if self.q0.len() != n {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: self.q0.len(),
            });
        }
        if self.horizon < 1 {
            return Err(CoreError::Config("scenario horizon must be >= 1".into()));
        }
        if !self.v_env.iter().all(|x| x.is_finite()) {
            return Err(CoreError::Config("v_env must be finite".into()));
        }
        for (i, &q) in self.q0.iter().enumerate() {
            let b = network.bus(i);
            if q < b.q_min || q > b.q_max {
                return Err(CoreError::InfeasibleState {
                    index: i,
                    violation: (b.q_min - q).max(q - b.q_max),
                });
            }
        }
        Ok(())
    }

    pub fn v_env_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.v_env.clone())
    }

    pub fn q0_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.q0.clone())
    }
}

/// High- or low-voltage disturbance family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    HighVoltage,
    LowVoltage,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::HighVoltage => "high",
            ScenarioKind::LowVoltage => "low",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(ScenarioKind::HighVoltage),
            "low" => Ok(ScenarioKind::LowVoltage),
            other => Err(CoreError::Config(format!(
                "unknown scenario kind '{other}' (expected high|low)"
            ))),
        }
    }
}

/// Time-indexed closed-loop record. Rows 0..=horizon carry the state, the
/// control the system would take there, the per-step cost, and the clipped
/// fraction; the control on the final row is recorded but not applied.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub h: f64,
    pub times: Vec<usize>,
    pub v: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub cost: Vec<f64>,
    pub clipped_fraction: Vec<f64>,
}

/// Transient/steady-state metrics of one episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Smallest t with every later voltage inside the safe band; horizon + 1
    /// if the tail never settles in-band.
    pub recovery_time: usize,
    /// Discounted cumulative cost `sum_t gamma^t h cost_t`.
    pub transient_cost: f64,
    /// `F(q)` at the final step.
    pub steady_state_objective: f64,
    /// Sup-norm of the final control below 1e-6.
    pub converged: bool,
    /// Projected-gradient fixed-point residual at the final injections.
    pub final_kkt_residual: f64,
}

/// One Euler step through the safe controller.
pub fn step(
    controller: &Controller,
    problem: &SteadyStateProblem,
    v: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let dec = controller.control(problem, v, q)?;
    let q_next = apply_rates(controller.h, problem, q, &dec.xi)?;
    let v_next = problem.voltage_full(&problem.restrict(&q_next));
    Ok((q_next, v_next, dec.xi))
}

pub(crate) fn apply_rates(
    h: f64,
    problem: &SteadyStateProblem,
    q: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut q_next = q + h * xi;
    for (slot, &i) in problem.ctrl().iter().enumerate() {
        let (lo, hi) = (problem.q_lo()[slot], problem.q_hi()[slot]);
        if q_next[i] > hi || q_next[i] < lo {
            // rounding of q + h*alpha*(bound - q) may overshoot by an ulp
            let margin = 4.0 * f64::EPSILON * (1.0 + hi.abs().max(lo.abs()) + q[i].abs());
            if q_next[i] > hi + margin || q_next[i] < lo - margin {
                return Err(CoreError::SafetyViolation {
                    index: i,
                    value: q_next[i],
                    lo,
                    hi,
                });
            }
            q_next[i] = q_next[i].clamp(lo, hi);
        }
    }
    Ok(q_next)
}

/// Nodal cost `sum_i C_i(q_i) + 1/2 q_i (v_i + v_env_i - 2 v_nom_i)` over the
/// controller buses (terms vanish where q_i = 0).
pub fn step_cost(
    problem: &SteadyStateProblem,
    v: &DVector<f64>,
    q: &DVector<f64>,
    v_env: &DVector<f64>,
) -> Result<f64> {
    let n = problem.n_buses();
    for len in [v.len(), q.len(), v_env.len()] {
        if len != n {
            return Err(CoreError::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    let mut total = 0.0;
    for (slot, &i) in problem.ctrl().iter().enumerate() {
        let c_q = problem.c_q()[slot];
        let v_nom = problem.v_nom_ctrl()[slot];
        total += 0.5 * c_q * q[i] * q[i] + 0.5 * q[i] * (v[i] + v_env[i] - 2.0 * v_nom);
    }
    Ok(total)
}

/// Simulate a full episode and derive its metrics.
pub fn run_episode(
    controller: &Controller,
    problem: &SteadyStateProblem,
    network: &Network,
    scenario: &Scenario,
    discount: f64,
) -> Result<(Trajectory, EpisodeMetrics)> {
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(CoreError::Config(format!(
            "discount must lie in (0, 1], got {discount}"
        )));
    }
    scenario.validate(network)?;
    let horizon = scenario.horizon;
    let v_env = scenario.v_env_vector();
    if (problem.v_env() - &v_env).amax() > 1e-12 {
        return Err(CoreError::Config(
            "problem was built for a different environment voltage than the scenario".into(),
        ));
    }
    let h = controller.h;
    let ctrl = problem.ctrl();

    let mut traj = Trajectory {
        h,
        times: Vec::with_capacity(horizon + 1),
        v: Vec::with_capacity(horizon + 1),
        q: Vec::with_capacity(horizon + 1),
        xi: Vec::with_capacity(horizon + 1),
        cost: Vec::with_capacity(horizon + 1),
        clipped_fraction: Vec::with_capacity(horizon + 1),
    };

    let mut q = scenario.q0_vector();
    let mut v = problem.voltage_full(&problem.restrict(&q));
    let mut transient_cost = 0.0;
    let mut gamma_t = 1.0;
    for t in 0..=horizon {
        let dec = controller.control(problem, &v, &q)?;
        let cost = step_cost(problem, &v, &q, &v_env)?;
        traj.times.push(t);
        traj.v.push(v.clone());
        traj.q.push(q.clone());
        traj.xi.push(dec.xi.clone());
        traj.cost.push(cost);
        traj.clipped_fraction.push(dec.clipped_fraction(ctrl));
        if t < horizon {
            transient_cost += gamma_t * h * cost;
            gamma_t *= discount;
            q = apply_rates(h, problem, &q, &dec.xi)?;
            v = problem.voltage_full(&problem.restrict(&q));
        }
    }

    let (v_lo, v_hi) = network.v_band();
    let in_band = |v: &DVector<f64>| (0..v.len()).all(|i| v[i] >= v_lo[i] && v[i] <= v_hi[i]);
    let mut recovery_time = horizon + 1;
    for t in (0..=horizon).rev() {
        if in_band(&traj.v[t]) {
            recovery_time = t;
        } else {
            break;
        }
    }

    let q_final = problem.restrict(traj.q.last().unwrap());
    let gamma_pg = 0.9 * steady_state::step_size_bound(problem);
    let metrics = EpisodeMetrics {
        recovery_time,
        transient_cost,
        steady_state_objective: steady_state::objective(problem, &q_final)?,
        converged: traj.xi.last().unwrap().amax() < 1e-6,
        final_kkt_residual: steady_state::kkt_residual(problem, &q_final, gamma_pg),
    };
    Ok((traj, metrics))
}

/// Draw `count` disturbance scenarios: per bus, `v_env = v_nom * (1 +/- d)`
/// with `d` uniform in `magnitude_range` and the sign fixed by `kind`.
/// Reproducible under `seed`.
pub fn generate_scenarios(
    network: &Network,
    kind: ScenarioKind,
    magnitude_range: (f64, f64),
    count: usize,
    seed: u64,
    horizon: usize,
) -> Result<Vec<Scenario>> {
    let (lo, hi) = magnitude_range;
    if !(lo > 0.0 && lo <= hi && hi < 0.5) {
        return Err(CoreError::Config(format!(
            "magnitude range ({lo}, {hi}) must satisfy 0 < lo <= hi < 0.5"
        )));
    }
    let n = network.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sign = match kind {
        ScenarioKind::HighVoltage => 1.0,
        ScenarioKind::LowVoltage => -1.0,
    };
    Ok((0..count)
        .map(|k| {
            let v_env = (0..n)
                .map(|i| {
                    let delta = if lo == hi { lo } else { rng.gen_range(lo..hi) };
                    network.bus(i).v_nom * (1.0 + sign * delta)
                })
                .collect();
            Scenario {
                v_env,
                q0: vec![0.0; n],
                horizon,
                seed: seed.wrapping_add(k as u64),
            }
        })
        .collect())
}
