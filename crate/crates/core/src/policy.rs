//! Per-bus monotone transient policy.
//!
//! Each controller carries two stacked-ReLU branches: a high-voltage branch
//! active above the deadband and a low-voltage branch active below it. The
//! branches are parameterized so that the structural conditions hold for
//! *every* parameter value:
//!
//! * weight partial sums are `-exp(u)` (high) or `+exp(u)` (low), hence
//!   strictly signed;
//! * biases start at zero and decrease by `exp(beta)` per unit, hence
//!   non-increasing.
//!
//! The policy output is scaled through `tanh` and the shrunk capacity box
//! `[q_lo * (1 - eps), q_hi * (1 - eps)]`, so it vanishes on the deadband, is
//! non-increasing in voltage, and is bounded by `c * alpha` times the shrunk
//! box margins whenever `q` lies in the shrunk box.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{Bus, Network};
use nalgebra::DVector;

/// Which side of the deadband a branch covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSign {
    /// Active for `v > v_hi`; output non-positive.
    High,
    /// Active for `v < v_lo`; output non-negative.
    Low,
}

/// Unconstrained parameters of one stacked-ReLU branch with `d` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneBranchParams {
    /// `d` reals; the l-th weight partial sum is `sign * exp(u[l])`.
    pub u: Vec<f64>,
    /// `d - 1` reals; bias decrements are `exp(beta[l])`.
    pub beta: Vec<f64>,
}

impl MonotoneBranchParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            u: vec![0.0; d],
            beta: vec![0.0; d.saturating_sub(1)],
        }
    }

    pub fn units(&self) -> usize {
        self.u.len()
    }

    fn validate(&self) -> Result<()> {
        if self.u.is_empty() {
            return Err(CoreError::InvariantViolation(
                "branch needs at least one unit".into(),
            ));
        }
        if self.beta.len() + 1 != self.u.len() {
            return Err(CoreError::InvariantViolation(format!(
                "branch with {} units needs {} bias decrements, got {}",
                self.u.len(),
                self.u.len() - 1,
                self.beta.len()
            )));
        }
        if !self.u.iter().chain(self.beta.iter()).all(|x| x.is_finite()) {
            return Err(CoreError::InvariantViolation(
                "branch parameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Both branches of one controller's policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusPolicy {
    pub high: MonotoneBranchParams,
    pub low: MonotoneBranchParams,
}

impl BusPolicy {
    pub fn zeros(d: usize) -> Self {
        Self {
            high: MonotoneBranchParams::zeros(d),
            low: MonotoneBranchParams::zeros(d),
        }
    }
}

/// Decentralized transient policy: one [`BusPolicy`] per controller slot plus
/// the shared output-bound fraction `c` and capacity margin `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub bus_policies: Vec<BusPolicy>,
    /// Output-bound fraction in [0, 1).
    pub c: f64,
    /// Capacity-margin fraction in (0, 1).
    pub epsilon: f64,
}

pub const DEFAULT_UNITS: usize = 8;
pub const DEFAULT_C: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 0.1;

impl PolicyParams {
    /// Unit-slope deadband policy: all `u` and `beta` at zero.
    pub fn zero_init(slots: usize, d: usize, c: f64, epsilon: f64) -> Result<Self> {
        let p = Self {
            bus_policies: (0..slots).map(|_| BusPolicy::zeros(d)).collect(),
            c,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn default_for(slots: usize) -> Self {
        Self::zero_init(slots, DEFAULT_UNITS, DEFAULT_C, DEFAULT_EPSILON)
            .expect("default parameters are valid")
    }

    /// Seeded random draw in the unconstrained parameter space, used by the
    /// randomized verification sweeps. `u` controls branch slopes (`exp(u)`
    /// scale), so `u_hi <= -0.5` keeps the policy gentle.
    pub fn random(
        slots: usize,
        d: usize,
        c: f64,
        epsilon: f64,
        u_lo: f64,
        u_hi: f64,
        seed: u64,
    ) -> Self {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let branch = |rng: &mut rand_chacha::ChaCha8Rng| MonotoneBranchParams {
            u: (0..d).map(|_| rng.gen_range(u_lo..u_hi)).collect(),
            beta: (0..d.saturating_sub(1))
                .map(|_| rng.gen_range(-3.0..1.0))
                .collect(),
        };
        let p = Self {
            bus_policies: (0..slots)
                .map(|_| BusPolicy {
                    high: branch(&mut rng),
                    low: branch(&mut rng),
                })
                .collect(),
            c,
            epsilon,
        };
        p.validate().expect("random draw is structurally valid");
        p
    }

    pub fn slots(&self) -> usize {
        self.bus_policies.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.c) {
            return Err(CoreError::InvariantViolation(format!(
                "c must lie in [0, 1), got {}",
                self.c
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(CoreError::InvariantViolation(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        for bp in &self.bus_policies {
            bp.high.validate()?;
            bp.low.validate()?;
        }
        Ok(())
    }

    /// Flatten all unconstrained parameters (training order: per slot,
    /// high.u, high.beta, low.u, low.beta).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for bp in &self.bus_policies {
            out.extend_from_slice(&bp.high.u);
            out.extend_from_slice(&bp.high.beta);
            out.extend_from_slice(&bp.low.u);
            out.extend_from_slice(&bp.low.beta);
        }
        out
    }

    /// Inverse of [`Self::to_flat`]; the layout (slots, units, c, epsilon) is taken
    /// from `self`.
    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.to_flat().len() {
            return Err(CoreError::DimensionMismatch {
                expected: self.to_flat().len(),
                got: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut k = 0;
        for bp in &mut out.bus_policies {
            for dst in [&mut bp.high, &mut bp.low] {
                for v in dst.u.iter_mut() {
                    *v = flat[k];
                    k += 1;
                }
                for v in dst.beta.iter_mut() {
                    *v = flat[k];
                    k += 1;
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Materialize the constrained weights and biases of one branch.
///
/// Weights are partial-sum differences `w_l = S_l - S_{l-1}` with
/// `S_l = -exp(u_l)` (high) or `+exp(u_l)` (low) and `S_0 = 0`; biases are
/// `b_1 = 0`, `b_l = b_{l-1} - exp(beta_{l-1})`.
pub fn branch_weights(params: &MonotoneBranchParams, sign: BranchSign) -> (Vec<f64>, Vec<f64>) {
    let d = params.units();
    let sgn = match sign {
        BranchSign::High => -1.0,
        BranchSign::Low => 1.0,
    };
    let mut w = Vec::with_capacity(d);
    let mut prev = 0.0;
    for &u in &params.u {
        let s = sgn * u.exp();
        w.push(s - prev);
        prev = s;
    }
    let mut b = Vec::with_capacity(d);
    let mut bias = 0.0;
    b.push(0.0);
    for &beta in &params.beta {
        bias -= beta.exp();
        b.push(bias);
    }
    (w, b)
}

/// Evaluate one stacked-ReLU branch at deviation `v_dev` (`v - v_hi` for the
/// high branch, `v - v_lo` for the low branch). Exactly zero on the safe side.
pub fn stacked_relu(v_dev: f64, w: &[f64], b: &[f64], sign: BranchSign) -> f64 {
    let z = match sign {
        BranchSign::High => v_dev,
        BranchSign::Low => -v_dev,
    };
    let mut acc = 0.0;
    for (wl, bl) in w.iter().zip(b.iter()) {
        let a = z + bl;
        if a > 0.0 {
            acc += wl * a;
        }
    }
    acc
}

/// Precomputed branch weights for repeated evaluation inside episodes.
#[derive(Debug, Clone)]
pub struct CompiledBusPolicy {
    w_high: Vec<f64>,
    b_high: Vec<f64>,
    w_low: Vec<f64>,
    b_low: Vec<f64>,
    pub q_lo_shrunk: f64,
    pub q_hi_shrunk: f64,
    v_lo: f64,
    v_hi: f64,
}

/// Policy compiled against a network's controller slots.
#[derive(Debug, Clone)]
pub struct CompiledPolicy {
    slots: Vec<CompiledBusPolicy>,
    pub c: f64,
}

impl CompiledPolicy {
    pub fn new(params: &PolicyParams, network: &Network) -> Result<Self> {
        let ctrl = network.controllable();
        if params.slots() != ctrl.len() {
            return Err(CoreError::DimensionMismatch {
                expected: ctrl.len(),
                got: params.slots(),
            });
        }
        params.validate()?;
        let slots = ctrl
            .iter()
            .zip(params.bus_policies.iter())
            .map(|(&i, bp)| {
                let bus = network.bus(i);
                let (w_high, b_high) = branch_weights(&bp.high, BranchSign::High);
                let (w_low, b_low) = branch_weights(&bp.low, BranchSign::Low);
                CompiledBusPolicy {
                    w_high,
                    b_high,
                    w_low,
                    b_low,
                    q_lo_shrunk: bus.q_min * (1.0 - params.epsilon),
                    q_hi_shrunk: bus.q_max * (1.0 - params.epsilon),
                    v_lo: bus.v_lo,
                    v_hi: bus.v_hi,
                }
            })
            .collect();
        Ok(Self {
            slots,
            c: params.c,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Policy output for controller slot `slot` at local state `(v_i, q_i)`.
    pub fn eval(&self, slot: usize, alpha: f64, v_i: f64, q_i: f64) -> f64 {
        let s = &self.slots[slot];
        let xi_high = stacked_relu(v_i - s.v_hi, &s.w_high, &s.b_high, BranchSign::High);
        let xi_low = stacked_relu(v_i - s.v_lo, &s.w_low, &s.b_low, BranchSign::Low);
        self.c * alpha * (q_i - s.q_lo_shrunk) * xi_high.tanh()
            + self.c * alpha * (s.q_hi_shrunk - q_i) * xi_low.tanh()
    }
}

/// `pi_i(v_i, q_i)` for the controller at `bus` (spec-level entry point; the
/// simulation loop uses [`CompiledPolicy`]).
pub fn policy_eval(
    params: &PolicyParams,
    slot: usize,
    bus: &Bus,
    alpha: f64,
    v_i: f64,
    q_i: f64,
) -> f64 {
    let bp = &params.bus_policies[slot];
    let (w_high, b_high) = branch_weights(&bp.high, BranchSign::High);
    let (w_low, b_low) = branch_weights(&bp.low, BranchSign::Low);
    let xi_high = stacked_relu(v_i - bus.v_hi, &w_high, &b_high, BranchSign::High);
    let xi_low = stacked_relu(v_i - bus.v_lo, &w_low, &b_low, BranchSign::Low);
    let q_lo_shrunk = bus.q_min * (1.0 - params.epsilon);
    let q_hi_shrunk = bus.q_max * (1.0 - params.epsilon);
    params.c * alpha * (q_i - q_lo_shrunk) * xi_high.tanh()
        + params.c * alpha * (q_hi_shrunk - q_i) * xi_low.tanh()
}

/// Stack the per-bus policies over the whole network: the result has one
/// entry per bus, zero at buses without a controller. `v` and `q` are full
/// bus vectors.
pub fn policy_eval_vector(
    params: &PolicyParams,
    network: &Network,
    alpha: f64,
    v: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = network.n();
    if v.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    if q.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: q.len(),
        });
    }
    let compiled = CompiledPolicy::new(params, network)?;
    let mut out = DVector::zeros(n);
    for (slot, &i) in network.controllable().iter().enumerate() {
        out[i] = compiled.eval(slot, alpha, v[i], q[i]);
    }
    Ok(out)
}

/// Gradient of `pi` with respect to the slot's flattened parameters
/// `[u_high, beta_high, u_low, beta_low]`, for actor updates.
pub fn policy_param_grad(
    params: &PolicyParams,
    slot: usize,
    bus: &Bus,
    alpha: f64,
    v_i: f64,
    q_i: f64,
) -> Vec<f64> {
    let bp = &params.bus_policies[slot];
    let c = params.c;
    let q_lo_shrunk = bus.q_min * (1.0 - params.epsilon);
    let q_hi_shrunk = bus.q_max * (1.0 - params.epsilon);

    let mut grad = Vec::with_capacity(2 * (bp.high.units() + bp.low.units()) - 2);
    for (branch, sign, coeff, v_edge) in [
        (&bp.high, BranchSign::High, c * alpha * (q_i - q_lo_shrunk), bus.v_hi),
        (&bp.low, BranchSign::Low, c * alpha * (q_hi_shrunk - q_i), bus.v_lo),
    ] {
        let (w, b) = branch_weights(branch, sign);
        let d = branch.units();
        let z = match sign {
            BranchSign::High => v_i - v_edge,
            BranchSign::Low => -(v_i - v_edge),
        };
        let relu: Vec<f64> = b.iter().map(|bl| (z + bl).max(0.0)).collect();
        let active: Vec<f64> = b.iter().map(|bl| if z + bl > 0.0 { 1.0 } else { 0.0 }).collect();
        let xi: f64 = w.iter().zip(relu.iter()).map(|(wl, rl)| wl * rl).sum();
        let dtanh = {
            let t = xi.tanh();
            1.0 - t * t
        };
        let outer = coeff * dtanh;
        let sgn = match sign {
            BranchSign::High => -1.0,
            BranchSign::Low => 1.0,
        };
        // d xi / d u_l = (relu_l - relu_{l+1}) * d S_l / d u_l
        for l in 0..d {
            let next = if l + 1 < d { relu[l + 1] } else { 0.0 };
            grad.push(outer * (relu[l] - next) * sgn * branch.u[l].exp());
        }
        // d xi / d beta_j = -exp(beta_j) * sum_{l > j} w_l * active_l
        for j in 0..d.saturating_sub(1) {
            let tail: f64 = (j + 1..d).map(|l| w[l] * active[l]).sum();
            grad.push(outer * (-branch.beta[j].exp()) * tail);
        }
    }
    grad
}
