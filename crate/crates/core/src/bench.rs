//! Benchmark harness: all controller variants over one shared scenario list,
//! with reproducible aggregate tables, plus the alpha-sweep experiment.


use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, ControllerVariant};
use crate::error::{CoreError, Result};
use crate::grid::Network;
use crate::io::{fmt_f64, scenario_set_hash};
use crate::policy::PolicyParams;
use crate::sim::{self, EpisodeMetrics, Scenario, Trajectory};
use crate::steady_state::SteadyStateProblem;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub variant: String,
    pub mean_recovery_time: f64,
    pub mean_transient_cost: f64,
    pub mean_objective: f64,
    pub converged_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario_count: usize,
    pub scenario_hash: String,
    pub seed: u64,
    pub rows: Vec<BenchmarkRow>,
    /// Per-variant, per-episode metrics in scenario order.
    pub episodes: Vec<(String, Vec<EpisodeMetrics>)>,
}

/// Variants to evaluate: TASRL and TransientOnly need the policy.
fn variants(policy: &PolicyParams) -> Vec<(ControllerVariant, Option<PolicyParams>)> {
    vec![
        (ControllerVariant::Tasrl, Some(policy.clone())),
        (ControllerVariant::SafeGradientFlow, None),
        (ControllerVariant::TransientOnly, Some(policy.clone())),
    ]
}

/// Run one variant over the scenario list. Episodes run in parallel;
/// collection order follows the scenario order, so results are
/// byte-reproducible.
pub fn run_variant(
    network: &Network,
    variant: ControllerVariant,
    policy: Option<&PolicyParams>,
    alpha: f64,
    h: f64,
    discount: f64,
    scenarios: &[Scenario],
) -> Result<Vec<EpisodeMetrics>> {
    let controller = Controller::new(
        &ControllerConfig::new(alpha, h, variant, policy.cloned())?,
        network,
    )?;
    scenarios
        .par_iter()
        .map(|sc| {
            let problem = SteadyStateProblem::new(network, &sc.v_env_vector())?;
            let (_, m) = sim::run_episode(&controller, &problem, network, sc, discount)?;
            Ok(m)
        })
        .collect()
}

pub fn summarize(variant: ControllerVariant, metrics: &[EpisodeMetrics]) -> BenchmarkRow {
    let count = metrics.len() as f64;
    BenchmarkRow {
        variant: variant.as_str().to_string(),
        mean_recovery_time: metrics.iter().map(|m| m.recovery_time as f64).sum::<f64>() / count,
        mean_transient_cost: metrics.iter().map(|m| m.transient_cost).sum::<f64>() / count,
        mean_objective: metrics.iter().map(|m| m.steady_state_objective).sum::<f64>() / count,
        converged_fraction: metrics.iter().filter(|m| m.converged).count() as f64 / count,
    }
}

/// Run every variant over the identical scenario list.
pub fn run_benchmark(
    network: &Network,
    policy: &PolicyParams,
    alpha: f64,
    h: f64,
    discount: f64,
    scenarios: &[Scenario],
    seed: u64,
) -> Result<BenchmarkReport> {
    if scenarios.is_empty() {
        return Err(CoreError::Config("benchmark needs at least one scenario".into()));
    }
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    for (variant, policy_opt) in variants(policy) {
        let metrics = run_variant(
            network,
            variant,
            policy_opt.as_ref(),
            alpha,
            h,
            discount,
            scenarios,
        )?;
        rows.push(summarize(variant, &metrics));
        episodes.push((variant.as_str().to_string(), metrics));
    }
    Ok(BenchmarkReport {
        scenario_count: scenarios.len(),
        scenario_hash: format!("{:016x}", scenario_set_hash(scenarios)),
        seed,
        rows,
        episodes,
    })
}

/// Aggregate table mirroring the benchmark layout (smaller is better in all
/// three columns).
pub fn render_report(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# benchmark over {} scenarios (seed {}, scenario-hash {})\n",
        report.scenario_count, report.seed, report.scenario_hash
    ));
    out.push_str("variant,mean_recovery_time,mean_transient_cost,mean_objective,converged_fraction\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.variant,
            fmt_f64(row.mean_recovery_time),
            fmt_f64(row.mean_transient_cost),
            fmt_f64(row.mean_objective),
            fmt_f64(row.converged_fraction),
        ));
    }
    out
}

/// Per-episode metric table for one variant.
pub fn render_episodes(metrics: &[EpisodeMetrics]) -> String {
    let mut out = String::from(
        "episode,recovery_time,transient_cost,objective,converged,final_kkt_residual\n",
    );
    for (k, m) in metrics.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            k,
            m.recovery_time,
            fmt_f64(m.transient_cost),
            fmt_f64(m.steady_state_objective),
            m.converged as u8,
            fmt_f64(m.final_kkt_residual),
        ));
    }
    out
}

/// One simulate run per alpha on a fixed scenario.
pub fn alpha_sweep(
    network: &Network,
    policy: Option<&PolicyParams>,
    variant: ControllerVariant,
    h: f64,
    discount: f64,
    scenario: &Scenario,
    alphas: &[f64],
) -> Result<Vec<(f64, Trajectory, EpisodeMetrics)>> {
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        if !(alpha.is_finite() && alpha > 0.0) || h * alpha > 1.0 {
            return Err(CoreError::InvalidAlpha { alpha, h });
        }
        let controller = Controller::new(
            &ControllerConfig::new(alpha, h, variant, policy.cloned())?,
            network,
        )?;
        let problem = SteadyStateProblem::new(network, &scenario.v_env_vector())?;
        let (traj, metrics) = sim::run_episode(&controller, &problem, network, scenario, discount)?;
        out.push((alpha, traj, metrics));
    }
    Ok(out)
}

/// Steps of a trajectory where the rate at `bus` sits on its clamp boundary,
/// paired with the rate magnitude. Saturation is detected from the recorded
/// data: `xi` equals `alpha * (bound - q)` only when the clamp was active.
pub fn saturated_rates_at_bus(
    traj: &Trajectory,
    problem: &SteadyStateProblem,
    alpha: f64,
    bus: usize,
) -> Vec<(usize, f64)> {
    let slot = match problem.ctrl().iter().position(|&i| i == bus) {
        Some(s) => s,
        None => return Vec::new(),
    };
    let mut out = Vec::new();
    for t in 0..traj.times.len() {
        let q = traj.q[t][bus];
        let xi = traj.xi[t][bus];
        let hi = alpha * (problem.q_hi()[slot] - q);
        let lo = alpha * (problem.q_lo()[slot] - q);
        let tol = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
        if xi != 0.0 && ((xi - hi).abs() <= tol || (xi - lo).abs() <= tol) {
            out.push((t, xi.abs()));
        }
    }
    out
}

/// Sanity predicate used by callers that compare sweep runs: the largest
/// saturated rate under the smaller alpha must not exceed the larger alpha's.
pub fn clamp_width_monotone(
    small: &[(usize, f64)],
    large: &[(usize, f64)],
) -> Option<bool> {
    let max_small = small.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let max_large = large.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if small.is_empty() || large.is_empty() {
        return None;
    }
    Some(max_small <= max_large)
}

/// Fixed sweep scenario: a deep high-voltage event on the first controller's
/// subtree (and mild elsewhere), sized so that controller rides its capacity
/// limit and the rate clamp stays active.
pub fn sweep_scenario(network: &Network, horizon: usize) -> Scenario {
    let n = network.n();
    let first = network.controllable()[0];
    let head = network.path(first);
    let v_env = (0..n)
        .map(|i| {
            let downstream = network.path(i).len() >= head.len()
                && network.path(i)[..head.len()] == *head;
            network.bus(i).v_nom * if downstream { 1.28 } else { 1.02 }
        })
        .collect::<Vec<_>>();
    Scenario {
        v_env,
        q0: vec![0.0; n],
        horizon,
        seed: 0,
    }
}
