//! Joint transient/steady-state volt-var control on radial distribution
//! feeders.
//!
//! The crate models a linearized radial grid, solves the steady-state
//! reactive-dispatch problem, runs a safety-filtered closed loop combining a
//! monotone transient policy with the cost gradient, certifies the stability
//! hypotheses numerically, and trains the policy without ever leaving the
//! capacity constraints.

pub mod bench;
pub mod controller;
pub mod error;
pub mod feeders;
pub mod grid;
pub mod io;
pub mod policy;
pub mod sim;
pub mod stability;
pub mod steady_state;
pub mod training;

pub use error::{CoreError, Result};
pub use grid::{build_network, env_voltage, impedance_matrices, voltage, Bus, Line, Network};
pub use policy::{
    branch_weights, policy_eval, policy_eval_vector, stacked_relu, BranchSign, BusPolicy,
    CompiledPolicy, MonotoneBranchParams, PolicyParams,
};
pub use controller::{
    barrier, cbf_qp_oracle, clamp_rate, safe_gradient_flow_control, tasrl_control,
    transient_only_control, ControlDecision, Controller, ControllerConfig, ControllerVariant,
};
pub use sim::{
    generate_scenarios, run_episode, step, step_cost, EpisodeMetrics, Scenario, ScenarioKind,
    Trajectory,
};
pub use stability::{
    certify, descent_inequality_lhs, check_stability_condition, lyapunov_monitor, policy_slope_matrix,
    CertificateReport, CertifyConfig,
};
pub use steady_state::{
    gradient, objective, projected_gradient_solve, qp_oracle, step_size_bound, SolveReport,
    SteadyStateProblem,
};
pub use training::{
    critic_eval, train, zeroth_order_update, Critic, ReplayBuffer, ScenarioSampler, TrainMethod,
    TrainReport, TrainerConfig,
};
