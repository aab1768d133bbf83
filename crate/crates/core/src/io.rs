//! File formats: network documents, policy checkpoints, scenario files, and
//! trajectory tables.
//!
//! Everything is line-oriented text (JSON documents, comma-separated numeric
//! tables) with floats printed at 17 significant digits so outputs diff
//! cleanly and round-trip losslessly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{build_network, Bus, Line, Network};
use crate::policy::{branch_weights, BranchSign, BusPolicy, MonotoneBranchParams, PolicyParams};
use crate::sim::{Scenario, Trajectory};

/// 17 significant digits, lossless for f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

// ---------------------------------------------------------------------------
// network files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NetworkFile {
    /// Unit reminder carried in the document; per-unit, v = squared voltage.
    #[serde(default = "default_units_note")]
    units: String,
    v0: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
}

fn default_units_note() -> String {
    "per-unit; v denotes squared voltage magnitude".to_string()
}

pub fn save_network(path: &Path, network: &Network) -> Result<()> {
    let doc = NetworkFile {
        units: default_units_note(),
        v0: network.v0(),
        buses: network.buses().to_vec(),
        lines: network.lines().to_vec(),
    };
    write_json(path, &doc)
}

/// Load and validate a network document, attributing invariant failures to
/// the line of the offending array element where possible.
pub fn load_network(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path)?;
    let doc: NetworkFile = serde_json::from_str(&text).map_err(|e| {
        CoreError::InvalidNetworkFile {
            line: Some(e.line()),
            message: e.to_string(),
        }
    })?;
    // structural pre-checks with element attribution
    for (idx, bus) in doc.buses.iter().enumerate() {
        if bus.id != idx {
            return Err(invalid_at(&text, "buses", idx, format!(
                "bus ids must be contiguous from 0 (position {idx} has id {})",
                bus.id
            )));
        }
        if idx == 0 {
            continue;
        }
        if !(bus.v_lo < bus.v_nom && bus.v_nom < bus.v_hi) {
            return Err(invalid_at(&text, "buses", idx, format!(
                "bus {}: requires v_lo < v_nom < v_hi",
                bus.id
            )));
        }
        if bus.eta <= 0.0 || bus.s_bar <= 0.0 {
            return Err(invalid_at(&text, "buses", idx, format!(
                "bus {}: eta and s_bar must be positive",
                bus.id
            )));
        }
        if !(bus.q_min <= 0.0 && bus.q_max >= 0.0) {
            return Err(invalid_at(&text, "buses", idx, format!(
                "bus {}: capacity box [{}, {}] must contain 0",
                bus.id, bus.q_min, bus.q_max
            )));
        }
    }
    let mut seen = Vec::new();
    for (idx, line) in doc.lines.iter().enumerate() {
        if line.r <= 0.0 || line.x <= 0.0 {
            return Err(invalid_at(&text, "lines", idx, format!(
                "line {idx}: r and x must be positive"
            )));
        }
        if line.from_bus >= doc.buses.len() || line.to_bus >= doc.buses.len() {
            return Err(invalid_at(&text, "lines", idx, format!(
                "line {idx}: endpoints ({}, {}) out of range",
                line.from_bus, line.to_bus
            )));
        }
        let key = (
            line.from_bus.min(line.to_bus),
            line.from_bus.max(line.to_bus),
        );
        if seen.contains(&key) {
            return Err(invalid_at(&text, "lines", idx, format!(
                "duplicate line between buses {} and {}",
                key.0, key.1
            )));
        }
        seen.push(key);
    }
    build_network(doc.buses, doc.lines, doc.v0).map_err(|e| CoreError::InvalidNetworkFile {
        line: None,
        message: e.to_string(),
    })
}

fn invalid_at(text: &str, array: &str, index: usize, message: String) -> CoreError {
    CoreError::InvalidNetworkFile {
        line: element_line(text, array, index),
        message,
    }
}

/// Line (1-based) of the `index`-th object inside the named top-level array.
fn element_line(text: &str, array: &str, index: usize) -> Option<usize> {
    let key = format!("\"{array}\"");
    let start = text.find(&key)? + key.len();
    let bytes = text.as_bytes();
    let mut depth = 0i32;
    let mut seen_objects = 0usize;
    let mut in_array = false;
    for (off, &b) in bytes.iter().enumerate().skip(start) {
        match b {
            b'[' if !in_array => {
                in_array = true;
            }
            b'{' if in_array => {
                if depth == 0 {
                    if seen_objects == index {
                        let line = text[..off].bytes().filter(|&c| c == b'\n').count() + 1;
                        return Some(line);
                    }
                    seen_objects += 1;
                }
                depth += 1;
            }
            b'}' if in_array => {
                depth -= 1;
            }
            b']' if in_array && depth == 0 => {
                return None;
            }
            _ => {}
        }
    }
    None
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// Descriptive metadata attached to a checkpoint by the trainer; the
/// stability verifier can attach its report here post-hoc.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: Option<String>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub held_out_improved_fraction: Option<f64>,
    #[serde(default)]
    pub training_ineffective: bool,
    #[serde(default)]
    pub aborted_non_finite: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<crate::stability::CertificateReport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointBranch {
    u: Vec<f64>,
    beta: Vec<f64>,
    /// Derived weights/biases, stored redundantly for inspection; the loader
    /// re-derives them and rejects edits that break the construction.
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointBus {
    high: CheckpointBranch,
    low: CheckpointBranch,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    c: f64,
    epsilon: f64,
    units: usize,
    bus_count: usize,
    buses: Vec<CheckpointBus>,
    #[serde(default)]
    meta: CheckpointMeta,
}

fn branch_to_file(p: &MonotoneBranchParams, sign: BranchSign) -> CheckpointBranch {
    let (w, b) = branch_weights(p, sign);
    CheckpointBranch {
        u: p.u.clone(),
        beta: p.beta.clone(),
        w,
        b,
    }
}

fn branch_from_file(cb: &CheckpointBranch, sign: BranchSign) -> Result<MonotoneBranchParams> {
    let p = MonotoneBranchParams {
        u: cb.u.clone(),
        beta: cb.beta.clone(),
    };
    let (w, b) = branch_weights(&p, sign);
    if cb.w.len() != w.len() || cb.b.len() != b.len() {
        return Err(CoreError::InvariantViolation(
            "checkpoint derived arrays have wrong length".into(),
        ));
    }
    if cb.b.first() != Some(&0.0) {
        return Err(CoreError::InvariantViolation(
            "checkpoint bias chain must start at 0".into(),
        ));
    }
    for (stored, derived) in cb.w.iter().zip(w.iter()).chain(cb.b.iter().zip(b.iter())) {
        if (stored - derived).abs() > 1e-12 {
            return Err(CoreError::InvariantViolation(format!(
                "checkpoint derived arrays disagree with parameters ({stored} vs {derived})"
            )));
        }
    }
    Ok(p)
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, meta: &CheckpointMeta) -> Result<()> {
    params.validate()?;
    let units = params.bus_policies.first().map(|b| b.high.units()).unwrap_or(0);
    let doc = CheckpointFile {
        c: params.c,
        epsilon: params.epsilon,
        units,
        bus_count: params.slots(),
        buses: params
            .bus_policies
            .iter()
            .map(|bp| CheckpointBus {
                high: branch_to_file(&bp.high, BranchSign::High),
                low: branch_to_file(&bp.low, BranchSign::Low),
            })
            .collect(),
        meta: meta.clone(),
    };
    write_json(path, &doc)
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, CheckpointMeta)> {
    let text = fs::read_to_string(path)?;
    let doc: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| CoreError::CorruptCheckpoint(e.to_string()))?;
    if doc.buses.len() != doc.bus_count {
        return Err(CoreError::InvariantViolation(format!(
            "checkpoint declares {} buses but carries {}",
            doc.bus_count,
            doc.buses.len()
        )));
    }
    let params = PolicyParams {
        bus_policies: doc
            .buses
            .iter()
            .map(|cb| {
                Ok(BusPolicy {
                    high: branch_from_file(&cb.high, BranchSign::High)?,
                    low: branch_from_file(&cb.low, BranchSign::Low)?,
                })
            })
            .collect::<Result<_>>()?,
        c: doc.c,
        epsilon: doc.epsilon,
    };
    params.validate()?;
    Ok((params, doc.meta))
}

/// Load a checkpoint and bind it to a network's controller count.
pub fn load_checkpoint_for(path: &Path, network: &Network) -> Result<(PolicyParams, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    let expected = network.controllable().len();
    if params.slots() != expected {
        return Err(CoreError::InvariantViolation(format!(
            "checkpoint bus count {} does not match the network's {} controllers",
            params.slots(),
            expected
        )));
    }
    Ok((params, meta))
}

// ---------------------------------------------------------------------------
// scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    #[serde(default = "default_units_note")]
    units: String,
    #[serde(flatten)]
    scenario: Scenario,
}

pub fn save_scenario(path: &Path, scenario: &Scenario) -> Result<()> {
    write_json(
        path,
        &ScenarioFile {
            units: default_units_note(),
            scenario: scenario.clone(),
        },
    )
}

pub fn load_scenario(path: &Path, network: &Network) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    let doc: ScenarioFile = serde_json::from_str(&text).map_err(|e| CoreError::Config(format!(
        "invalid scenario file: {e}"
    )))?;
    doc.scenario.validate(network)?;
    Ok(doc.scenario)
}

// ---------------------------------------------------------------------------
// trajectory tables
// ---------------------------------------------------------------------------

/// Comma-separated trajectory: `t, v_1..v_n, q_1..q_n, xi_1..xi_n, cost`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.v.first().map(|v| v.len()).unwrap_or(0);
    let mut out = String::new();
    out.push('t');
    for k in 1..=n {
        out.push_str(&format!(",v_{k}"));
    }
    for k in 1..=n {
        out.push_str(&format!(",q_{k}"));
    }
    for k in 1..=n {
        out.push_str(&format!(",xi_{k}"));
    }
    out.push_str(",cost\n");
    for t in 0..traj.times.len() {
        out.push_str(&traj.times[t].to_string());
        for x in traj.v[t].iter() {
            out.push(',');
            out.push_str(&fmt_f64(*x));
        }
        for x in traj.q[t].iter() {
            out.push(',');
            out.push_str(&fmt_f64(*x));
        }
        for x in traj.xi[t].iter() {
            out.push(',');
            out.push_str(&fmt_f64(*x));
        }
        out.push(',');
        out.push_str(&fmt_f64(traj.cost[t]));
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_text(path, &trajectory_csv(traj))
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Config(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// FNV-1a over a byte stream; fixes the scenario-set identity recorded in
/// benchmark reports.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn scenario_set_hash(scenarios: &[Scenario]) -> u64 {
    let mut buf = String::new();
    for sc in scenarios {
        for v in &sc.v_env {
            buf.push_str(&fmt_f64(*v));
            buf.push(',');
        }
        for q in &sc.q0 {
            buf.push_str(&fmt_f64(*q));
            buf.push(',');
        }
        buf.push_str(&sc.horizon.to_string());
        buf.push(';');
    }
    fnv1a(buf.as_bytes())
}
