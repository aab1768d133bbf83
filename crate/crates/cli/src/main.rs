//! `tasrl`: reproducible experiments for safe volt-var control.
//!
//! Exit codes: 0 success, 1 usage error, 2 invariant/safety violation,
//! 3 numerical failure. `TASRL_THREADS` overrides the worker pool size.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tasrl_core::bench;
use tasrl_core::controller::ControllerVariant;
use tasrl_core::io;
use tasrl_core::policy::PolicyParams;
use tasrl_core::sim::{self, ScenarioKind};
use tasrl_core::stability::{certify, CertifyConfig};
use tasrl_core::steady_state::{self, SteadyStateProblem};
use tasrl_core::training::{self, ScenarioSampler, TrainMethod, TrainerConfig};
use tasrl_core::{CoreError, Network};

#[derive(Parser)]
#[command(
    name = "tasrl",
    about = "Simulation, training, and verification harness for safe inverter volt-var control",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Network description file (JSON).
    #[arg(long)]
    network: PathBuf,
    /// Barrier gain; must satisfy h * alpha <= 1.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Sampling period in seconds.
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    /// Discount factor in (0, 1].
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Episode length in steps.
    #[arg(long, default_value_t = 100)]
    t_f: usize,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenario episodes under one controller variant.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        /// Controller variant: tasrl | sgf | transient.
        #[arg(long, default_value = "tasrl")]
        controller: String,
        /// Policy checkpoint (required for tasrl and transient).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of scenarios to generate.
        #[arg(long, default_value_t = 10)]
        scenarios: usize,
        /// Disturbance family: high | low.
        #[arg(long, default_value = "high")]
        kind: String,
        /// Disturbance magnitude range as fractions of nominal.
        #[arg(long, default_value_t = 0.05)]
        mag_lo: f64,
        #[arg(long, default_value_t = 0.15)]
        mag_hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the generated scenario files.
        #[arg(long)]
        dump_scenarios: bool,
    },
    /// Train the transient policy.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Training method: zo | ac.
        #[arg(long, default_value = "zo")]
        method: String,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Units per policy branch.
        #[arg(long, default_value_t = 8)]
        units: usize,
        /// Output-bound fraction c in [0, 1).
        #[arg(long, default_value_t = 0.5)]
        c: f64,
        /// Capacity margin fraction in (0, 1).
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// Checkpoint output path.
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Run all three controller variants over a shared scenario list.
    Benchmark {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenarios: usize,
        #[arg(long, default_value = "high")]
        kind: String,
        #[arg(long, default_value_t = 0.05)]
        mag_lo: f64,
        #[arg(long, default_value_t = 0.15)]
        mag_hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify the stability hypotheses of a trained policy by sampling.
    VerifyStability {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trajectories: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rewrite the checkpoint with the certificate embedded in its
        /// metadata.
        #[arg(long)]
        attach: bool,
    },
    /// Solve the steady-state dispatch problem for one scenario file.
    SolveSteadyState {
        #[command(flatten)]
        common: CommonOpts,
        /// Scenario file (JSON) carrying v_env.
        #[arg(long)]
        scenario: PathBuf,
        /// Use the exhaustive enumeration oracle instead of projected gradient.
        #[arg(long)]
        oracle: bool,
    },
    /// Simulate one fixed scenario under several barrier gains.
    AlphaSweep {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value = "sgf")]
        controller: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated list of alpha values.
        #[arg(long, default_value = "0.1,0.5")]
        alphas: String,
        /// Scenario file; the shipped sweep disturbance is used when absent.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print to stdout and succeed; anything else is a
            // usage error (exit 1)
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(threads) = std::env::var("TASRL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &CoreError) -> u8 {
    match e {
        CoreError::SafetyViolation { .. }
        | CoreError::InfeasibleState { .. }
        | CoreError::InvariantViolation(_)
        | CoreError::DegenerateReference { .. } => 2,
        CoreError::NonFiniteLoss { .. }
        | CoreError::SingularX
        | CoreError::ProblemTooLarge { .. } => 3,
        _ => 1,
    }
}

fn load_policy_for(
    checkpoint: &Option<PathBuf>,
    network: &Network,
    variant: ControllerVariant,
) -> Result<Option<PolicyParams>, CoreError> {
    match (checkpoint, variant) {
        (Some(path), _) => Ok(Some(io::load_checkpoint_for(path, network)?.0)),
        (None, ControllerVariant::SafeGradientFlow) => Ok(None),
        (None, _) => Err(CoreError::Config(
            "this controller variant requires --checkpoint".into(),
        )),
    }
}

fn run(cli: Cli) -> Result<ExitCode, CoreError> {
    match cli.command {
        Command::Simulate {
            common,
            controller,
            checkpoint,
            scenarios,
            kind,
            mag_lo,
            mag_hi,
            seed,
            dump_scenarios,
        } => {
            let network = io::load_network(&common.network)?;
            let variant = ControllerVariant::parse(&controller)?;
            let policy = load_policy_for(&checkpoint, &network, variant)?;
            let kind = ScenarioKind::parse(&kind)?;
            let list = sim::generate_scenarios(
                &network,
                kind,
                (mag_lo, mag_hi),
                scenarios,
                seed,
                common.t_f,
            )?;
            let ctrl = tasrl_core::Controller::new(
                &tasrl_core::ControllerConfig::new(common.alpha, common.h, variant, policy)?,
                &network,
            )?;
            let mut all_metrics = Vec::new();
            for (k, sc) in list.iter().enumerate() {
                let problem = SteadyStateProblem::new(&network, &sc.v_env_vector())?;
                let (traj, metrics) =
                    sim::run_episode(&ctrl, &problem, &network, sc, common.gamma)?;
                io::write_trajectory(
                    &common.out.join(format!("trajectory_{k:04}.csv")),
                    &traj,
                )?;
                if dump_scenarios {
                    io::save_scenario(&common.out.join(format!("scenario_{k:04}.json")), sc)?;
                }
                all_metrics.push(metrics);
            }
            io::write_text(
                &common.out.join("metrics.csv"),
                &bench::render_episodes(&all_metrics),
            )?;
            let row = bench::summarize(variant, &all_metrics);
            let aggregate = format!(
                "variant,episodes,mean_recovery_time,mean_transient_cost,mean_objective,converged_fraction\n{},{},{},{},{},{}\n",
                row.variant,
                all_metrics.len(),
                io::fmt_f64(row.mean_recovery_time),
                io::fmt_f64(row.mean_transient_cost),
                io::fmt_f64(row.mean_objective),
                io::fmt_f64(row.converged_fraction),
            );
            io::write_text(&common.out.join("aggregate.csv"), &aggregate)?;
            println!(
                "simulated {} episodes: mean recovery {}, mean transient cost {}, mean objective {}",
                all_metrics.len(),
                row.mean_recovery_time,
                row.mean_transient_cost,
                row.mean_objective,
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            common,
            method,
            episodes,
            steps,
            seed,
            units,
            c,
            epsilon,
            out_checkpoint,
        } => {
            let network = io::load_network(&common.network)?;
            let slots = network.controllable().len();
            let init = PolicyParams::zero_init(slots, units, c, epsilon)?;
            let config = TrainerConfig {
                method: TrainMethod::parse(&method)?,
                episodes,
                steps,
                seed,
                ..TrainerConfig::default()
            };
            let sampler = ScenarioSampler {
                magnitude_range: (0.05, 0.15),
                horizon: steps,
                seed,
            };
            let report = training::train(
                &config, &network, common.alpha, common.h, common.gamma, &sampler, &init,
            )?;
            let mut log = String::from("episode,mean_transient_cost,clipped_fraction\n");
            for row in &report.log {
                log.push_str(&format!(
                    "{},{},{}\n",
                    row.episode,
                    io::fmt_f64(row.mean_transient_cost),
                    io::fmt_f64(row.clipped_fraction)
                ));
            }
            io::write_text(&common.out.join("training_log.csv"), &log)?;
            let meta = io::CheckpointMeta {
                method: Some(method),
                episodes: Some(episodes),
                seed: Some(seed),
                held_out_improved_fraction: Some(report.held_out_improved_fraction),
                training_ineffective: report.training_ineffective,
                aborted_non_finite: report.aborted_non_finite,
                certificate: None,
            };
            io::save_checkpoint(&out_checkpoint, &report.params, &meta)?;
            println!(
                "trained {} episodes; held-out improvement fraction {:.3}{}{}",
                report.log.len(),
                report.held_out_improved_fraction,
                if report.training_ineffective {
                    " [TrainingIneffective]"
                } else {
                    ""
                },
                if report.aborted_non_finite {
                    " [aborted: non-finite loss]"
                } else {
                    ""
                },
            );
            if report.aborted_non_finite {
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Benchmark {
            common,
            checkpoint,
            scenarios,
            kind,
            mag_lo,
            mag_hi,
            seed,
        } => {
            let network = io::load_network(&common.network)?;
            let (policy, _) = io::load_checkpoint_for(&checkpoint, &network)?;
            let kind = ScenarioKind::parse(&kind)?;
            let list = sim::generate_scenarios(
                &network,
                kind,
                (mag_lo, mag_hi),
                scenarios,
                seed,
                common.t_f,
            )?;
            // per-variant results land on disk as they complete, so an abort
            // in a later variant leaves the earlier tables behind
            let mut rows = Vec::new();
            let mut episodes = Vec::new();
            for (variant, with_policy) in [
                (ControllerVariant::Tasrl, true),
                (ControllerVariant::SafeGradientFlow, false),
                (ControllerVariant::TransientOnly, true),
            ] {
                let metrics = bench::run_variant(
                    &network,
                    variant,
                    with_policy.then_some(&policy),
                    common.alpha,
                    common.h,
                    common.gamma,
                    &list,
                )?;
                io::write_text(
                    &common.out.join(format!("episodes_{}.csv", variant.as_str())),
                    &bench::render_episodes(&metrics),
                )?;
                rows.push(bench::summarize(variant, &metrics));
                episodes.push((variant.as_str().to_string(), metrics));
            }
            let report = bench::BenchmarkReport {
                scenario_count: list.len(),
                scenario_hash: format!("{:016x}", io::scenario_set_hash(&list)),
                seed,
                rows,
                episodes,
            };
            io::write_text(&common.out.join("benchmark.csv"), &bench::render_report(&report))?;
            print!("{}", bench::render_report(&report));
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyStability {
            common,
            checkpoint,
            trajectories,
            steps,
            seed,
            attach,
        } => {
            let network = io::load_network(&common.network)?;
            let (policy, mut meta) = io::load_checkpoint_for(&checkpoint, &network)?;
            let cfg = CertifyConfig {
                trajectories,
                steps,
                alpha: common.alpha,
                h: common.h,
                seed,
                ..CertifyConfig::default()
            };
            let report = certify(&network, &policy, &cfg)?;
            io::write_json(&common.out.join("certificate.json"), &report)?;
            if attach {
                meta.certificate = Some(report.clone());
                io::save_checkpoint(&checkpoint, &policy, &meta)?;
            }
            println!(
                "checked {} states: condition violations {}, worst margin {}, inequality violations {}, trajectory-decrease violations {} (degenerate scenarios {})",
                report.n_samples,
                report.condition_violations,
                io::fmt_f64(report.worst_margin),
                report.inequality_violations,
                report.lyapunov_violations,
                report.degenerate_scenarios,
            );
            if report.clean() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::SolveSteadyState {
            common,
            scenario,
            oracle,
        } => {
            let network = io::load_network(&common.network)?;
            let sc = io::load_scenario(&scenario, &network)?;
            let problem = SteadyStateProblem::new(&network, &sc.v_env_vector())?;
            let report = if oracle {
                steady_state::qp_oracle(&problem)?
            } else {
                steady_state::solve_default(&problem)?
            };
            io::write_json(&common.out.join("solve_report.json"), &report)?;
            println!(
                "objective {} after {} iterations (residual {}, converged {})",
                io::fmt_f64(report.objective),
                report.iterations,
                io::fmt_f64(report.residual),
                report.converged
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::AlphaSweep {
            common,
            controller,
            checkpoint,
            alphas,
            scenario,
        } => {
            let network = io::load_network(&common.network)?;
            let variant = ControllerVariant::parse(&controller)?;
            let policy = load_policy_for(&checkpoint, &network, variant)?;
            let alphas: Vec<f64> = alphas
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| CoreError::Config(format!("bad alpha '{s}': {e}")))
                })
                .collect::<Result<_, _>>()?;
            let sc = match scenario {
                Some(p) => io::load_scenario(&p, &network)?,
                None => bench::sweep_scenario(&network, common.t_f),
            };
            let runs = bench::alpha_sweep(
                &network,
                policy.as_ref(),
                variant,
                common.h,
                common.gamma,
                &sc,
                &alphas,
            )?;
            for (alpha, traj, metrics) in &runs {
                let tag = format!("{alpha}").replace('.', "p");
                io::write_trajectory(
                    &common.out.join(format!("sweep_alpha_{tag}.csv")),
                    traj,
                )?;
                println!(
                    "alpha {}: recovery {}, transient cost {}, objective {}",
                    alpha,
                    metrics.recovery_time,
                    io::fmt_f64(metrics.transient_cost),
                    io::fmt_f64(metrics.steady_state_objective),
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

