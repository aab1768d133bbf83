//! Policy optimization over the unconstrained parameter space.
//!
//! Two trainers share the same environment loop (every interaction goes
//! through the safe controller, so training can never leave the capacity
//! box):
//!
//! * `ZerothOrder` (default): antithetic two-point gradient estimates of the
//!   discounted transient cost in `(u, beta)` space. Robust and fully
//!   deterministic; the stability machinery is independent of the optimizer.
//! * `ActorCritic`: per-bus replay buffers, a small action-value network per
//!   controller, and deterministic-policy-gradient updates. Per-bus updates
//!   read only the bus's own buffer.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, ControllerVariant};
use crate::error::{CoreError, Result};
use crate::grid::Network;
use crate::policy::{policy_param_grad, CompiledPolicy, PolicyParams};
use crate::sim::{self, Scenario, ScenarioKind};
use crate::steady_state::SteadyStateProblem;

/// Per-bus transition storage, FIFO-evicted at capacity.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: VecDeque<Transition>,
}

/// One stored interaction of a single bus.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub v: f64,
    pub q: f64,
    pub f: f64,
    /// `-c_i(t)`.
    pub reward: f64,
    pub v_next: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            data: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    /// Uniform sample of `batch` indices.
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..batch).map(|_| rng.gen_range(0..self.data.len())).collect()
    }
}

/// One-hidden-layer tanh action-value network `Q(v, q, f)`.
#[derive(Debug, Clone)]
pub struct Critic {
    width: usize,
    w1: Vec<f64>, // width x 3, row-major
    b1: Vec<f64>,
    w2: Vec<f64>, // width
    b2: f64,
}

impl Critic {
    /// Hidden weights random, output weights zero: the initial value estimate
    /// is exactly zero everywhere while gradients still flow. The voltage
    /// input is centered at nominal so the tanh features curve within the
    /// narrow per-unit operating range.
    pub fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            width,
            w1: (0..width * 3).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            b1: vec![0.0; width],
            w2: vec![0.0; width],
            b2: 0.0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.width * 3 + self.width + self.width + 1
    }

    fn features(v: f64, q: f64, f: f64) -> [f64; 3] {
        [v - 1.0, q, f]
    }

    pub fn eval(&self, v: f64, q: f64, f: f64) -> f64 {
        let x = Self::features(v, q, f);
        let mut out = self.b2;
        for j in 0..self.width {
            let z = self.w1[3 * j] * x[0]
                + self.w1[3 * j + 1] * x[1]
                + self.w1[3 * j + 2] * x[2]
                + self.b1[j];
            out += self.w2[j] * z.tanh();
        }
        out
    }

    /// Gradient of the value with respect to the inputs `(v, q, f)`.
    pub fn grad_inputs(&self, v: f64, q: f64, f: f64) -> [f64; 3] {
        let x = Self::features(v, q, f);
        let mut g = [0.0; 3];
        for j in 0..self.width {
            let z = self.w1[3 * j] * x[0]
                + self.w1[3 * j + 1] * x[1]
                + self.w1[3 * j + 2] * x[2]
                + self.b1[j];
            let d = self.w2[j] * (1.0 - z.tanh().powi(2));
            g[0] += d * self.w1[3 * j];
            g[1] += d * self.w1[3 * j + 1];
            g[2] += d * self.w1[3 * j + 2];
        }
        g
    }

    /// Value plus gradient with respect to the flattened parameters
    /// `[w1, b1, w2, b2]`.
    pub fn eval_with_param_grad(&self, v: f64, q: f64, f: f64) -> (f64, Vec<f64>) {
        let x = Self::features(v, q, f);
        let mut grad = vec![0.0; self.num_params()];
        let mut out = self.b2;
        let (off_b1, off_w2, off_b2) =
            (self.width * 3, self.width * 4, self.width * 5);
        for j in 0..self.width {
            let z = self.w1[3 * j] * x[0]
                + self.w1[3 * j + 1] * x[1]
                + self.w1[3 * j + 2] * x[2]
                + self.b1[j];
            let t = z.tanh();
            out += self.w2[j] * t;
            let d = self.w2[j] * (1.0 - t * t);
            grad[3 * j] = d * x[0];
            grad[3 * j + 1] = d * x[1];
            grad[3 * j + 2] = d * x[2];
            grad[off_b1 + j] = d;
            grad[off_w2 + j] = t;
        }
        grad[off_b2] = 1.0;
        (out, grad)
    }

    pub fn apply_step(&mut self, direction: &[f64], lr: f64) {
        let (off_b1, off_w2, off_b2) =
            (self.width * 3, self.width * 4, self.width * 5);
        for (w, d) in self.w1.iter_mut().zip(direction.iter()) {
            *w += lr * d;
        }
        for j in 0..self.width {
            self.b1[j] += lr * direction[off_b1 + j];
            self.w2[j] += lr * direction[off_w2 + j];
        }
        self.b2 += lr * direction[off_b2];
    }
}

/// Spec-level wrapper around [`Critic::eval`].
pub fn critic_eval(critic: &Critic, v_i: f64, q_i: f64, f_i: f64) -> f64 {
    critic.eval(v_i, q_i, f_i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMethod {
    ActorCritic,
    ZerothOrder,
}

impl TrainMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ac" => Ok(TrainMethod::ActorCritic),
            "zo" => Ok(TrainMethod::ZerothOrder),
            other => Err(CoreError::Config(format!(
                "unknown training method '{other}' (expected ac|zo)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub method: TrainMethod,
    pub episodes: usize,
    pub steps: usize,
    pub batch: usize,
    /// Actor step size; also the ascent step of the zeroth-order update.
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub critic_width: usize,
    /// Perturbation scale of the zeroth-order estimator.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::ZerothOrder,
            episodes: 200,
            steps: 100,
            batch: 32,
            actor_lr: 0.25,
            critic_lr: 0.01,
            critic_width: 32,
            perturbation: 0.2,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    fn validate(&self) -> Result<()> {
        // episodes = 0 is allowed and returns the initialization unchanged
        if self.steps < 1 {
            return Err(CoreError::Config("steps must be >= 1".into()));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 || self.perturbation <= 0.0 {
            return Err(CoreError::Config("step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic stream of training disturbances (alternating high/low).
#[derive(Debug, Clone)]
pub struct ScenarioSampler {
    pub magnitude_range: (f64, f64),
    pub horizon: usize,
    pub seed: u64,
}

impl ScenarioSampler {
    pub fn draw(&self, network: &Network, k: usize) -> Result<Scenario> {
        let kind = if k.is_multiple_of(2) {
            ScenarioKind::HighVoltage
        } else {
            ScenarioKind::LowVoltage
        };
        let mut v = sim::generate_scenarios(
            network,
            kind,
            self.magnitude_range,
            1,
            self.seed.wrapping_add(k as u64),
            self.horizon,
        )?;
        Ok(v.pop().expect("one scenario requested"))
    }

    pub fn draw_many(&self, network: &Network, count: usize) -> Result<Vec<Scenario>> {
        (0..count).map(|k| self.draw(network, k)).collect()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: usize,
    pub mean_transient_cost: f64,
    pub clipped_fraction: f64,
}

/// Training outcome; `params` always satisfies the structural policy
/// invariants (by parameterization, not by optimization).
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: PolicyParams,
    pub log: Vec<TrainLogRow>,
    /// Set when a non-finite loss aborted training; `params` is the last
    /// finite checkpoint.
    pub aborted_non_finite: bool,
    /// Fraction of held-out scenarios where the trained policy beats the
    /// initialization.
    pub held_out_improved_fraction: f64,
    /// Set when that fraction falls below 0.8.
    pub training_ineffective: bool,
    /// Snapshots taken at 25/50/75% of training, for structural audits.
    pub snapshots: Vec<PolicyParams>,
}

/// Discounted transient cost and mean clipped fraction of one episode under
/// the TASRL controller with the given policy.
pub fn rollout_cost(
    params: &PolicyParams,
    network: &Network,
    alpha: f64,
    h: f64,
    discount: f64,
    scenario: &Scenario,
) -> Result<(f64, f64)> {
    let controller = Controller::new(
        &ControllerConfig::new(alpha, h, ControllerVariant::Tasrl, Some(params.clone()))?,
        network,
    )?;
    let problem = SteadyStateProblem::new(network, &scenario.v_env_vector())?;
    let (traj, metrics) = sim::run_episode(&controller, &problem, network, scenario, discount)?;
    let clipped =
        traj.clipped_fraction.iter().sum::<f64>() / traj.clipped_fraction.len() as f64;
    Ok((metrics.transient_cost, clipped))
}

/// One antithetic evaluation pair plus a normalized descent step along the
/// sampled direction; generic in the objective for unit-level sanity checks.
///
/// The step length is `lr` regardless of the objective's scale (the
/// two-point difference only supplies the sign), which keeps the update
/// usable across disturbance magnitudes without per-problem tuning.
pub fn es_step<F: FnMut(&[f64]) -> f64>(
    theta: &[f64],
    sigma: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
    mut objective: F,
) -> (Vec<f64>, f64, f64) {
    let delta: Vec<f64> = (0..theta.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let plus: Vec<f64> = theta
        .iter()
        .zip(delta.iter())
        .map(|(t, d)| t + sigma * d)
        .collect();
    let minus: Vec<f64> = theta
        .iter()
        .zip(delta.iter())
        .map(|(t, d)| t - sigma * d)
        .collect();
    let j_plus = objective(&plus);
    let j_minus = objective(&minus);
    let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
    let scale = lr * (j_plus - j_minus).signum() / norm;
    let next = theta
        .iter()
        .zip(delta.iter())
        .map(|(t, d)| t - scale * d)
        .collect();
    (next, j_plus, j_minus)
}

/// One zeroth-order descent step on the mean transient cost over a scenario
/// batch. Deterministic under `seed`; zero step size returns the input.
#[allow(clippy::too_many_arguments)]
pub fn zeroth_order_update(
    params: &PolicyParams,
    network: &Network,
    alpha: f64,
    h: f64,
    discount: f64,
    batch: &[Scenario],
    scale: f64,
    step_size: f64,
    seed: u64,
) -> Result<PolicyParams> {
    if scale <= 0.0 {
        return Err(CoreError::Config("perturbation scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = params.to_flat();
    let mut bad = false;
    let (next, j_plus, j_minus) = es_step(&theta, scale, step_size, &mut rng, |flat| {
        let candidate = match params.from_flat(flat) {
            Ok(p) => p,
            Err(_) => {
                bad = true;
                return 0.0;
            }
        };
        let mut total = 0.0;
        for sc in batch {
            match rollout_cost(&candidate, network, alpha, h, discount, sc) {
                Ok((cost, _)) => total += cost,
                Err(_) => bad = true,
            }
        }
        total / batch.len() as f64
    });
    if bad || !j_plus.is_finite() || !j_minus.is_finite() {
        return Err(CoreError::NonFiniteLoss { episode: 0 });
    }
    params.from_flat(&next)
}

/// Run the configured trainer against scenarios drawn from `sampler`.
pub fn train(
    config: &TrainerConfig,
    network: &Network,
    alpha: f64,
    h: f64,
    discount: f64,
    sampler: &ScenarioSampler,
    init: &PolicyParams,
) -> Result<TrainReport> {
    config.validate()?;
    let scenarios: Vec<Scenario> = (0..config.episodes)
        .map(|k| {
            let mut sc = sampler.draw(network, k)?;
            sc.horizon = config.steps;
            Ok(sc)
        })
        .collect::<Result<_>>()?;
    train_with_scenarios(config, network, alpha, h, discount, &scenarios, sampler, init)
}

/// As [`train`] but with an explicit episode list (one scenario per episode).
#[allow(clippy::too_many_arguments)]
pub fn train_with_scenarios(
    config: &TrainerConfig,
    network: &Network,
    alpha: f64,
    h: f64,
    discount: f64,
    scenarios: &[Scenario],
    sampler: &ScenarioSampler,
    init: &PolicyParams,
) -> Result<TrainReport> {
    config.validate()?;
    init.validate()?;
    let outcome = match config.method {
        TrainMethod::ZerothOrder => {
            train_zeroth_order(config, network, alpha, h, discount, scenarios, init)?
        }
        TrainMethod::ActorCritic => {
            train_actor_critic(config, network, alpha, h, discount, scenarios, init)?
        }
    };
    let (params, log, aborted, snapshots) = outcome;

    // held-out audit against the initialization
    let held_out = held_out_scenarios(network, sampler, config.steps, 25)?;
    let mut improved = 0usize;
    for sc in &held_out {
        let (trained_cost, _) = rollout_cost(&params, network, alpha, h, discount, sc)?;
        let (init_cost, _) = rollout_cost(init, network, alpha, h, discount, sc)?;
        if trained_cost < init_cost {
            improved += 1;
        }
    }
    let frac = improved as f64 / held_out.len() as f64;
    Ok(TrainReport {
        params,
        log,
        aborted_non_finite: aborted,
        held_out_improved_fraction: frac,
        training_ineffective: frac < 0.8,
        snapshots,
    })
}

fn held_out_scenarios(
    network: &Network,
    sampler: &ScenarioSampler,
    steps: usize,
    count: usize,
) -> Result<Vec<Scenario>> {
    let held = ScenarioSampler {
        magnitude_range: sampler.magnitude_range,
        horizon: steps,
        seed: sampler.seed ^ 0x5EED_0FF5,
    };
    held.draw_many(network, count)
}

type TrainOutcome = (PolicyParams, Vec<TrainLogRow>, bool, Vec<PolicyParams>);

fn snapshot_points(episodes: usize) -> [usize; 3] {
    [episodes / 4, episodes / 2, (3 * episodes) / 4]
}

fn train_zeroth_order(
    config: &TrainerConfig,
    network: &Network,
    alpha: f64,
    h: f64,
    discount: f64,
    scenarios: &[Scenario],
    init: &PolicyParams,
) -> Result<TrainOutcome> {
    let mut params = init.clone();
    let mut log = Vec::with_capacity(scenarios.len());
    let mut snapshots = Vec::new();
    let points = snapshot_points(scenarios.len());
    for (ep, sc) in scenarios.iter().enumerate() {
        if points.contains(&ep) {
            snapshots.push(params.clone());
        }
        let batch = std::slice::from_ref(sc);
        match zeroth_order_update(
            &params,
            network,
            alpha,
            h,
            discount,
            batch,
            config.perturbation,
            config.actor_lr,
            config.seed.wrapping_add(ep as u64),
        ) {
            Ok(next) => {
                // log the unperturbed cost of the new iterate on this scenario
                let (cost, clipped) =
                    rollout_cost(&next, network, alpha, h, discount, sc)?;
                if !cost.is_finite() {
                    return Ok((params, log, true, snapshots));
                }
                log.push(TrainLogRow {
                    episode: ep,
                    mean_transient_cost: cost,
                    clipped_fraction: clipped,
                });
                params = next;
            }
            Err(CoreError::NonFiniteLoss { .. }) => {
                return Ok((params, log, true, snapshots));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((params, log, false, snapshots))
}

struct AgentState {
    critic: Critic,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
}

fn train_actor_critic(
    config: &TrainerConfig,
    network: &Network,
    alpha: f64,
    h: f64,
    discount: f64,
    scenarios: &[Scenario],
    init: &PolicyParams,
) -> Result<TrainOutcome> {
    let ctrl = network.controllable().to_vec();
    let mut params = init.clone();
    let mut agents: Vec<AgentState> = ctrl
        .iter()
        .enumerate()
        .map(|(slot, _)| {
            // distinct deterministic stream per bus; updates for bus i may
            // only consume bus-i data and bus-i randomness
            let mut rng =
                ChaCha8Rng::seed_from_u64(config.seed ^ (0x9E37_79B9 + slot as u64));
            AgentState {
                critic: Critic::new(config.critic_width, &mut rng),
                buffer: ReplayBuffer::new(20_000),
                rng,
            }
        })
        .collect();
    let noise_std = 0.02;
    let mut log = Vec::with_capacity(scenarios.len());
    let mut snapshots = Vec::new();
    let points = snapshot_points(scenarios.len());

    for (ep, sc) in scenarios.iter().enumerate() {
        if points.contains(&ep) {
            snapshots.push(params.clone());
        }
        let problem = SteadyStateProblem::new(network, &sc.v_env_vector())?;
        let compiled = CompiledPolicy::new(&params, network)?;
        let mut q = sc.q0_vector();
        let mut v = problem.voltage_full(&problem.restrict(&q));
        let mut episode_cost = 0.0;
        let mut gamma_t = 1.0;
        let mut clipped_hits = 0usize;
        for _ in 0..sc.horizon {
            let mut xi = DVector::zeros(network.n());
            let mut per_bus: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(ctrl.len());
            for (slot, &i) in ctrl.iter().enumerate() {
                let noise: f64 = {
                    let z: f64 = StandardNormal.sample(&mut agents[slot].rng);
                    noise_std * z
                };
                let pi = compiled.eval(slot, alpha, v[i], q[i]) + noise;
                let grad = problem.c_q()[slot] * q[i] + v[i] - problem.v_nom_ctrl()[slot];
                let lo = alpha * (problem.q_lo()[slot] - q[i]);
                let hi = alpha * (problem.q_hi()[slot] - q[i]);
                let f = (pi - grad).clamp(lo.min(0.0), hi.max(0.0));
                if f != pi - grad {
                    clipped_hits += 1;
                }
                xi[i] = f;
                let c_i = 0.5 * problem.c_q()[slot] * q[i] * q[i]
                    + 0.5 * q[i] * (v[i] + sc.v_env[i] - 2.0 * problem.v_nom_ctrl()[slot]);
                per_bus.push((v[i], q[i], f, -c_i));
                episode_cost += gamma_t * h * c_i;
            }
            let q_next = sim::apply_rates(h, &problem, &q, &xi)?;
            let v_next = problem.voltage_full(&problem.restrict(&q_next));
            for (slot, &i) in ctrl.iter().enumerate() {
                let (sv, sq, sf, sr) = per_bus[slot];
                agents[slot].buffer.push(Transition {
                    v: sv,
                    q: sq,
                    f: sf,
                    reward: sr,
                    v_next: v_next[i],
                });
            }
            q = q_next;
            v = v_next;
            gamma_t *= discount;
        }
        log.push(TrainLogRow {
            episode: ep,
            mean_transient_cost: episode_cost,
            clipped_fraction: clipped_hits as f64 / (sc.horizon * ctrl.len()) as f64,
        });

        // per-bus updates from per-bus buffers only
        let mut aborted = false;
        for (slot, &i) in ctrl.iter().enumerate() {
            let bus = network.bus(i);
            let c_q = problem.c_q()[slot];
            let v_nom = problem.v_nom_ctrl()[slot];
            let (q_lo, q_hi) = (problem.q_lo()[slot], problem.q_hi()[slot]);
            let agent = &mut agents[slot];
            if agent.buffer.len() < config.batch {
                continue;
            }
            let compiled = CompiledPolicy::new(&params, network)?;
            let updates = 10;
            let mut actor_dir = vec![0.0; params.bus_policies[slot].high.units() * 4 - 2];
            let mut actor_hits = 0usize;
            for _ in 0..updates {
                let idx = agent.buffer.sample_indices(config.batch, &mut agent.rng);
                let mut critic_dir = vec![0.0; agent.critic.num_params()];
                for &k in &idx {
                    let t = *agent.buffer.get(k);
                    // next action under the current policy and local gradient
                    let q_next = t.q + h * t.f;
                    let grad_next = c_q * q_next + t.v_next - v_nom;
                    let pi_next = compiled.eval(slot, alpha, t.v_next, q_next);
                    let lo = alpha * (q_lo - q_next);
                    let hi = alpha * (q_hi - q_next);
                    let f_next = (pi_next - grad_next).clamp(lo.min(0.0), hi.max(0.0));
                    let target =
                        t.reward + discount * agent.critic.eval(t.v_next, q_next, f_next);
                    let (value, pgrad) = agent.critic.eval_with_param_grad(t.v, t.q, t.f);
                    let err = target - value;
                    if !err.is_finite() {
                        aborted = true;
                        break;
                    }
                    for (d, g) in critic_dir.iter_mut().zip(pgrad.iter()) {
                        *d += err * g / config.batch as f64;
                    }
                    // actor: ascend dQ/df * dpi/dtheta where the clamp is
                    // inactive at the stored state
                    let grad_now = c_q * t.q + t.v - v_nom;
                    let pi_now = compiled.eval(slot, alpha, t.v, t.q);
                    let lo_now = alpha * (q_lo - t.q);
                    let hi_now = alpha * (q_hi - t.q);
                    let raw_now = pi_now - grad_now;
                    if raw_now > lo_now.min(0.0) && raw_now < hi_now.max(0.0) {
                        let dq_df = agent.critic.grad_inputs(t.v, t.q, raw_now)[2];
                        let dpi = policy_param_grad(&params, slot, bus, alpha, t.v, t.q);
                        for (a, g) in actor_dir.iter_mut().zip(dpi.iter()) {
                            *a += dq_df * g / config.batch as f64;
                        }
                        actor_hits += 1;
                    }
                }
                if aborted {
                    break;
                }
                agent.critic.apply_step(&critic_dir, config.critic_lr);
            }
            if aborted {
                return Ok((params, log, true, snapshots));
            }
            if actor_hits > 0 {
                let mut flat = params.to_flat();
                let per_slot = actor_dir.len();
                let offset = slot * per_slot;
                for (j, a) in actor_dir.iter().enumerate() {
                    flat[offset + j] += config.actor_lr * a / updates as f64;
                }
                match params.from_flat(&flat) {
                    Ok(p) => params = p,
                    Err(_) => return Ok((params, log, true, snapshots)),
                }
            }
        }
    }
    Ok((params, log, false, snapshots))
}
