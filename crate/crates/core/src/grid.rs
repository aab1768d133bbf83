//! Radial distribution network model with the linearized branch-flow voltage map.
//!
//! Voltages are squared magnitudes in per-unit throughout. For a tree rooted at
//! the substation (bus 0), the impedance matrices are
//!
//! ```text
//! R_ij = 2 * sum of r over lines shared by the root paths of buses i and j
//! X_ij = 2 * sum of x over the same shared lines
//! ```
//!
//! and the voltage map is `v = R p + X q + v0 * 1 = X q + v_env`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A network bus. Bus 0 is the substation; its injection fields are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    /// Index, contiguous from 0 (substation).
    pub id: usize,
    /// Active power injection, per-unit (negative for loads).
    pub p: f64,
    /// Reactive capacity lower bound, per-unit.
    pub q_min: f64,
    /// Reactive capacity upper bound, per-unit.
    pub q_max: f64,
    /// Nominal squared voltage magnitude, per-unit.
    pub v_nom: f64,
    /// Lower edge of the safe squared-voltage band.
    pub v_lo: f64,
    /// Upper edge of the safe squared-voltage band.
    pub v_hi: f64,
    /// Reactive power cost coefficient (dimensionless).
    pub eta: f64,
    /// Apparent power capacity, per-unit.
    pub s_bar: f64,
}

impl Bus {
    /// A bus hosts an inverter controller iff its capacity box has interior.
    pub fn is_controllable(&self) -> bool {
        self.q_min < 0.0 && self.q_max > 0.0
    }

    fn validate(&self) -> Result<()> {
        if self.id == 0 {
            return Ok(());
        }
        if !(self.q_min <= 0.0 && self.q_max >= 0.0) {
            return Err(CoreError::InvariantViolation(format!(
                "bus {}: capacity box [{}, {}] must contain 0",
                self.id, self.q_min, self.q_max
            )));
        }
        if self.is_controllable() && self.q_min >= self.q_max {
            return Err(CoreError::InvariantViolation(format!(
                "bus {}: q_min must be < q_max",
                self.id
            )));
        }
        if !(self.v_lo < self.v_nom && self.v_nom < self.v_hi) {
            return Err(CoreError::InvariantViolation(format!(
                "bus {}: requires v_lo < v_nom < v_hi, got [{}, {}, {}]",
                self.id, self.v_lo, self.v_nom, self.v_hi
            )));
        }
        if self.eta <= 0.0 || self.s_bar <= 0.0 {
            return Err(CoreError::InvariantViolation(format!(
                "bus {}: eta and s_bar must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// A distribution line with series impedance, oriented away from the root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    /// Series resistance, per-unit.
    pub r: f64,
    /// Series reactance, per-unit.
    pub x: f64,
}

/// An immutable radial network with cached impedance matrices.
///
/// Non-substation buses map to vector/matrix index `id - 1`. All operations
/// are pure; the value is safe to share across threads.
#[derive(Debug, Clone)]
pub struct Network {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    r_mat: DMatrix<f64>,
    x_mat: DMatrix<f64>,
    v0: f64,
    /// Per non-substation bus: indices into `lines` on the path from bus 0.
    paths: Vec<Vec<usize>>,
    controllable: Vec<usize>,
}

/// Validates the tree rooted at bus 0 and computes the path-intersection
/// impedance matrices.
pub fn build_network(buses: Vec<Bus>, lines: Vec<Line>, v0: f64) -> Result<Network> {
    let n_total = buses.len();
    if n_total < 2 {
        return Err(CoreError::InvariantViolation(
            "network needs a substation and at least one bus".into(),
        ));
    }
    let n = n_total - 1;
    for (i, b) in buses.iter().enumerate() {
        if b.id != i {
            return Err(CoreError::InvariantViolation(format!(
                "bus ids must be contiguous from 0: position {i} has id {}",
                b.id
            )));
        }
        b.validate()?;
    }
    if lines.len() != n {
        return Err(CoreError::InvariantViolation(format!(
            "a tree on {n_total} buses needs {n} lines, got {}",
            lines.len()
        )));
    }

    // Adjacency with duplicate detection (either orientation).
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_total];
    let mut seen: Vec<(usize, usize)> = Vec::with_capacity(n);
    for (k, line) in lines.iter().enumerate() {
        if line.from_bus >= n_total || line.to_bus >= n_total || line.from_bus == line.to_bus {
            return Err(CoreError::InvariantViolation(format!(
                "line {k}: endpoints ({}, {}) out of range",
                line.from_bus, line.to_bus
            )));
        }
        if line.r <= 0.0 || line.x <= 0.0 {
            return Err(CoreError::InvariantViolation(format!(
                "line {k}: r and x must be positive"
            )));
        }
        let key = (line.from_bus.min(line.to_bus), line.from_bus.max(line.to_bus));
        if seen.contains(&key) {
            return Err(CoreError::DuplicateLine { a: key.0, b: key.1 });
        }
        seen.push(key);
        adj[line.from_bus].push((line.to_bus, k));
        adj[line.to_bus].push((line.from_bus, k));
    }

    // BFS from the root; with |lines| = n_total - 1, any revisit is a cycle and
    // any unreached bus is disconnected.
    let mut path_of: Vec<Option<Vec<usize>>> = vec![None; n_total];
    path_of[0] = Some(Vec::new());
    let mut queue = std::collections::VecDeque::from([0usize]);
    let mut visited_edges = vec![false; n];
    while let Some(u) = queue.pop_front() {
        for &(w, k) in &adj[u] {
            if visited_edges[k] {
                continue;
            }
            visited_edges[k] = true;
            if path_of[w].is_some() {
                return Err(CoreError::CycleDetected {
                    from: lines[k].from_bus,
                    to: lines[k].to_bus,
                });
            }
            let mut p = path_of[u].clone().unwrap();
            p.push(k);
            path_of[w] = Some(p);
            queue.push_back(w);
        }
    }
    let mut paths = Vec::with_capacity(n);
    for (id, entry) in path_of.iter().enumerate().skip(1) {
        match entry {
            Some(p) => paths.push(p.clone()),
            None => return Err(CoreError::DisconnectedBus { bus: id }),
        }
    }

    // Shared-path impedance sums. Paths are line-index sets, so the
    // intersection is a plain set intersection.
    let mut r_mat = DMatrix::zeros(n, n);
    let mut x_mat = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (mut r, mut x) = (0.0, 0.0);
            for &k in &paths[i] {
                if paths[j].contains(&k) {
                    r += lines[k].r;
                    x += lines[k].x;
                }
            }
            r_mat[(i, j)] = 2.0 * r;
            r_mat[(j, i)] = 2.0 * r;
            x_mat[(i, j)] = 2.0 * x;
            x_mat[(j, i)] = 2.0 * x;
        }
    }

    let controllable = buses
        .iter()
        .skip(1)
        .filter(|b| b.is_controllable())
        .map(|b| b.id - 1)
        .collect();

    Ok(Network {
        buses,
        lines,
        r_mat,
        x_mat,
        v0,
        paths,
        controllable,
    })
}

/// Returns the cached impedance matrices `(R, X)`.
pub fn impedance_matrices(network: &Network) -> (&DMatrix<f64>, &DMatrix<f64>) {
    (&network.r_mat, &network.x_mat)
}

impl Network {
    /// Number of non-substation buses (the dimension of v, q, p vectors).
    pub fn n(&self) -> usize {
        self.buses.len() - 1
    }

    /// Vector indices (bus id - 1) of buses hosting controllers.
    pub fn controllable(&self) -> &[usize] {
        &self.controllable
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// The bus record for vector index `i` (bus id `i + 1`).
    pub fn bus(&self, i: usize) -> &Bus {
        &self.buses[i + 1]
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn r_matrix(&self) -> &DMatrix<f64> {
        &self.r_mat
    }

    pub fn x_matrix(&self) -> &DMatrix<f64> {
        &self.x_mat
    }

    /// Line indices on the root path of vector index `i`.
    pub fn path(&self, i: usize) -> &[usize] {
        &self.paths[i]
    }

    /// Nominal squared voltages as a vector.
    pub fn v_nom(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.buses.iter().skip(1).map(|b| b.v_nom))
    }

    /// Safe-band edges as `(v_lo, v_hi)` vectors.
    pub fn v_band(&self) -> (DVector<f64>, DVector<f64>) {
        let lo = DVector::from_iterator(self.n(), self.buses.iter().skip(1).map(|b| b.v_lo));
        let hi = DVector::from_iterator(self.n(), self.buses.iter().skip(1).map(|b| b.v_hi));
        (lo, hi)
    }

    /// Capacity bounds as `(q_lo, q_hi)` vectors (zero-width at uncontrolled buses).
    pub fn q_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let lo = DVector::from_iterator(self.n(), self.buses.iter().skip(1).map(|b| b.q_min));
        let hi = DVector::from_iterator(self.n(), self.buses.iter().skip(1).map(|b| b.q_max));
        (lo, hi)
    }

    /// Active injections shipped with the network.
    pub fn p(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.buses.iter().skip(1).map(|b| b.p))
    }
}

/// `v = X q + v_env`.
pub fn voltage(network: &Network, q: &DVector<f64>, v_env: &DVector<f64>) -> Result<DVector<f64>> {
    let n = network.n();
    if q.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: q.len(),
        });
    }
    if v_env.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: v_env.len(),
        });
    }
    Ok(&network.x_mat * q + v_env)
}

/// `v_env = R p + v0 * 1`, the non-controllable voltage component.
pub fn env_voltage(network: &Network, p: &DVector<f64>, v0: f64) -> Result<DVector<f64>> {
    let n = network.n();
    if p.len() != n {
        return Err(CoreError::DimensionMismatch {
            expected: n,
            got: p.len(),
        });
    }
    Ok(&network.r_mat * p + DVector::from_element(n, v0))
}
