//! End-to-end runs of every subcommand against a temp workspace.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tasrl_core::feeders;
use tasrl_core::io;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tasrl"))
}

fn setup(dir: &Path) -> PathBuf {
    let net_path = dir.join("feeder13.json");
    io::save_network(&net_path, &feeders::feeder13()).unwrap();
    net_path
}

#[test]
fn full_pipeline_train_simulate_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let net = setup(dir.path());
    let ckpt = dir.path().join("policy.json");

    let status = bin()
        .args([
            "train",
            "--network",
            net.to_str().unwrap(),
            "--method",
            "zo",
            "--episodes",
            "20",
            "--steps",
            "40",
            "--seed",
            "1",
            "--out",
            dir.path().join("train_out").to_str().unwrap(),
            "--out-checkpoint",
            ckpt.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(ckpt.exists());
    let log = fs::read_to_string(dir.path().join("train_out/training_log.csv")).unwrap();
    assert!(log.starts_with("episode,mean_transient_cost,clipped_fraction"));
    assert_eq!(log.lines().count(), 21);

    let sim_out = dir.path().join("sim_out");
    let status = bin()
        .args([
            "simulate",
            "--network",
            net.to_str().unwrap(),
            "--controller",
            "tasrl",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--scenarios",
            "3",
            "--kind",
            "high",
            "--seed",
            "7",
            "--t-f",
            "30",
            "--out",
            sim_out.to_str().unwrap(),
            "--dump-scenarios",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let traj = fs::read_to_string(sim_out.join("trajectory_0000.csv")).unwrap();
    assert!(traj.starts_with("t,v_1"));
    assert_eq!(traj.lines().count(), 1 + 31);
    assert!(sim_out.join("scenario_0000.json").exists());
    assert!(sim_out.join("metrics.csv").exists());
    assert!(sim_out.join("aggregate.csv").exists());

    // benchmark twice: byte-identical outputs
    let out_a = dir.path().join("bench_a");
    let out_b = dir.path().join("bench_b");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args([
                "benchmark",
                "--network",
                net.to_str().unwrap(),
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--scenarios",
                "6",
                "--kind",
                "low",
                "--seed",
                "3",
                "--t-f",
                "40",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(out_a.join("benchmark.csv")).unwrap();
    let b = fs::read(out_b.join("benchmark.csv")).unwrap();
    assert_eq!(a, b);
    for variant in ["tasrl", "sgf", "transient"] {
        let ea = fs::read(out_a.join(format!("episodes_{variant}.csv"))).unwrap();
        let eb = fs::read(out_b.join(format!("episodes_{variant}.csv"))).unwrap();
        assert_eq!(ea, eb);
    }

    // solve-steady-state against a dumped scenario
    let status = bin()
        .args([
            "solve-steady-state",
            "--network",
            net.to_str().unwrap(),
            "--scenario",
            sim_out.join("scenario_0000.json").to_str().unwrap(),
            "--out",
            dir.path().join("solve_out").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let report = fs::read_to_string(dir.path().join("solve_out/solve_report.json")).unwrap();
    for field in ["q_star", "v_star", "objective", "iterations", "residual", "converged"] {
        assert!(report.contains(field), "missing field {field}");
    }

    // verify-stability on the trained checkpoint (reduced sampling)
    let status = bin()
        .args([
            "verify-stability",
            "--network",
            net.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--trajectories",
            "6",
            "--steps",
            "50",
            "--out",
            dir.path().join("verify_out").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    // exit code 0 (clean) or 2 (violations found) are both well-formed outcomes
    assert!(matches!(status.code(), Some(0) | Some(2)));
    assert!(dir.path().join("verify_out/certificate.json").exists());

    // alpha sweep with the gradient-only controller
    let sweep_out = dir.path().join("sweep_out");
    let status = bin()
        .args([
            "alpha-sweep",
            "--network",
            net.to_str().unwrap(),
            "--controller",
            "sgf",
            "--alphas",
            "0.1,0.5",
            "--t-f",
            "30",
            "--out",
            sweep_out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(sweep_out.join("sweep_alpha_0p1.csv").exists());
    assert!(sweep_out.join("sweep_alpha_0p5.csv").exists());
}

#[test]
fn usage_errors_exit_one() {
    // missing required flags
    let output = bin().args(["simulate"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));

    // unknown controller variant
    let dir = tempfile::tempdir().unwrap();
    let net = setup(dir.path());
    let output = bin()
        .args([
            "simulate",
            "--network",
            net.to_str().unwrap(),
            "--controller",
            "bogus",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));

    // help exits cleanly
    let output = bin().args(["--help"]).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).contains("simulate"));
}

#[test]
fn invalid_alpha_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = setup(dir.path());
    let output = bin()
        .args([
            "alpha-sweep",
            "--network",
            net.to_str().unwrap(),
            "--controller",
            "sgf",
            "--alphas",
            "1.5",
            "--h",
            "1.0",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("alpha"));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let net = setup(dir.path());
    let ckpt = dir.path().join("bad.json");
    // a checkpoint for 2 controllers cannot drive the 3-controller feeder
    let params = tasrl_core::policy::PolicyParams::default_for(2);
    io::save_checkpoint(&ckpt, &params, &io::CheckpointMeta::default()).unwrap();
    let output = bin()
        .args([
            "simulate",
            "--network",
            net.to_str().unwrap(),
            "--controller",
            "tasrl",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("bus count"));
}

#[test]
fn network_file_errors_report_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, "{\n  \"v0\": 1.0,\n  oops\n}\n").unwrap();
    let output = bin()
        .args([
            "simulate",
            "--network",
            path.to_str().unwrap(),
            "--controller",
            "sgf",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("line 3"));
}
