//! Shipped synthetic radial feeders.
//!
//! Line impedances are drawn uniformly from [0.01, 0.1] p.u. with a fixed
//! seed; feeder size and controller placement follow the benchmark layouts
//! (13 buses with controllers at 2, 7, 9; 123 buses with controllers at 14
//! named buses). Controller capacity uses `q_max = 0.45 * p_rated` with
//! `s_bar = sqrt(p_rated^2 + q_max^2)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{build_network, Bus, Line, Network};

const IMPEDANCE_LO: f64 = 0.01;
const IMPEDANCE_HI: f64 = 0.1;

/// Fixed impedance seed for the 13-bus feeder. Chosen so that the root line
/// is stiff enough to regulate the laterals off bus 1 and the closed loop
/// contracts at h = 1 (see the feeder sanity tests).
const SEED_13: u64 = 9;
/// Fixed impedance seed for the 123-bus feeder.
const SEED_123: u64 = 3;

/// Default squared-voltage safe band on shipped feeders (a +/-5% band on v).
pub const V_LO: f64 = 0.95;
pub const V_HI: f64 = 1.05;

fn make_bus(id: usize, p: f64, q_max: f64, p_rated: f64, eta: f64) -> Bus {
    let s_bar = (p_rated * p_rated + q_max * q_max).sqrt();
    Bus {
        id,
        p,
        q_min: -q_max,
        q_max,
        v_nom: 1.0,
        v_lo: V_LO,
        v_hi: V_HI,
        eta,
        s_bar,
    }
}

fn build_feeder(
    parent: &[usize],
    controllers: &[usize],
    seed: u64,
    p_rated: f64,
    eta: f64,
) -> Network {
    let n = parent.len();
    let q_max = 0.45 * p_rated;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Lines first (impedance draws in line order), then bus loads.
    let lines: Vec<Line> = (0..n)
        .map(|i| Line {
            from_bus: parent[i],
            to_bus: i + 1,
            r: rng.gen_range(IMPEDANCE_LO..IMPEDANCE_HI),
            x: rng.gen_range(IMPEDANCE_LO..IMPEDANCE_HI),
        })
        .collect();
    let buses: Vec<Bus> = (0..=n)
        .map(|id| {
            if id == 0 {
                make_bus(0, 0.0, q_max, p_rated, eta)
            } else if controllers.contains(&id) {
                make_bus(id, rng.gen_range(0.0..0.5 * p_rated), q_max, p_rated, eta)
            } else {
                make_bus(id, -rng.gen_range(0.02..0.08), 0.0, p_rated, eta)
            }
        })
        .collect();
    build_network(buses, lines, 1.0).expect("shipped feeder must be a valid tree")
}

/// 13-bus radial feeder: a trunk 0-1-2 with laterals, controllers at buses
/// 2, 7, and 9.
pub fn feeder13() -> Network {
    let parent = parent_13();
    build_feeder(&parent, &[2, 7, 9], SEED_13, 1.0, 0.05)
}

/// Parent of bus `i + 1` in the 13-bus layout: three laterals off bus 1, one
/// controller per lateral, so each controller can regulate its own branch
/// without overshooting the others.
fn parent_13() -> Vec<usize> {
    //       0 - 1 - 2 - 3 - 4 - 5
    //           |
    //           +-- 6 - 7 - 8
    //           +-- 9 - 10 - 11
    //           +-- 12
    vec![0, 1, 2, 3, 4, 1, 6, 7, 1, 9, 10, 1]
}

/// Truncation of the 13-bus feeder to buses 0..=9 (9 non-substation buses),
/// keeping all three controllers. Small enough for the exhaustive QP oracle.
pub fn feeder13_sub10() -> Network {
    let parent = vec![0, 1, 2, 3, 4, 1, 6, 7, 1];
    build_feeder(&parent, &[2, 7, 9], SEED_13, 1.0, 0.05)
}

/// 123-bus radial feeder: 14 laterals off the substation, one controller per
/// lateral at buses 10, 11, 16, 20, 33, 36, 48, 59, 61, 66, 75, 83, 92, 104.
pub fn feeder123() -> Network {
    let parent = parent_123();
    build_feeder(&parent, &CONTROLLERS_123, SEED_123, 0.8, 0.05)
}

pub const CONTROLLERS_123: [usize; 14] = [10, 11, 16, 20, 33, 36, 48, 59, 61, 66, 75, 83, 92, 104];

/// Parent array for the 123-bus layout: fourteen chains off the substation,
/// one controller per chain at depth 4 so every controller has enough
/// upstream reactance to regulate its own lateral.
fn parent_123() -> Vec<usize> {
    let n = 122;
    let mut laterals: Vec<Vec<usize>> = vec![Vec::new(); 14];
    let mut k = 0usize;
    for id in 1..=n {
        if CONTROLLERS_123.contains(&id) {
            continue;
        }
        laterals[k % 14].push(id);
        k += 1;
    }
    for (lat, &ctrl) in laterals.iter_mut().zip(CONTROLLERS_123.iter()) {
        let pos = 3.min(lat.len());
        lat.insert(pos, ctrl);
    }
    let mut parent = vec![0usize; n];
    for lat in &laterals {
        let mut prev = 0usize;
        for &id in lat {
            parent[id - 1] = prev;
            prev = id;
        }
    }
    parent
}

/// A single-chain feeder 0-1-...-n with every bus controllable; used by tests
/// and small oracles.
pub fn chain(n: usize, seed: u64) -> Network {
    let parent: Vec<usize> = (0..n).collect();
    let controllers: Vec<usize> = (1..=n).collect();
    build_feeder(&parent, &controllers, seed, 0.5, 0.1)
}

/// A two-bus star (both buses children of the substation); the off-diagonal
/// coupling is exactly zero, which decouples the two closed loops.
pub fn star2(seed: u64) -> Network {
    build_feeder(&[0, 0], &[1, 2], seed, 0.5, 0.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn feeder13_shape_and_controllers() {
        let net = feeder13();
        assert_eq!(net.n(), 12);
        assert_eq!(net.controllable(), &[1, 6, 8]); // buses 2, 7, 9
        assert!(min_eig_sym(net.x_matrix()) > 0.0);
        assert!(min_eig_sym(net.r_matrix()) > 0.0);
    }

    #[test]
    fn feeder13_root_line_supports_laterals() {
        // Buses 1 and 12 couple to every controller only through the root
        // line; keep it stiff enough that full controller effort moves their
        // voltage by at least a 10% band violation.
        let net = feeder13();
        let x01 = net.lines()[0].x;
        let total_capacity: f64 = net
            .controllable()
            .iter()
            .map(|&c| net.bus(c).q_max)
            .sum();
        assert!(
            2.0 * x01 * total_capacity > 0.10,
            "root reactance {x01} too weak for shipped capacities"
        );
    }

    #[test]
    fn feeder123_shape() {
        let net = feeder123();
        assert_eq!(net.n(), 122);
        let ctrl: Vec<usize> = net.controllable().iter().map(|c| c + 1).collect();
        assert_eq!(ctrl, CONTROLLERS_123.to_vec());
        assert!(min_eig_sym(net.x_matrix()) > 0.0);
    }

    #[test]
    fn shipped_feeders_contract_at_unit_sampling() {
        // h = 1 closed-loop stability requires lambda_max(C_q + X_cc) < 2.
        for net in [feeder13(), feeder123(), feeder13_sub10()] {
            let ctrl = net.controllable();
            let m = ctrl.len();
            let mut a = DMatrix::zeros(m, m);
            for (bi, &i) in ctrl.iter().enumerate() {
                for (bj, &j) in ctrl.iter().enumerate() {
                    a[(bi, bj)] = net.x_matrix()[(i, j)];
                }
                let bus = net.bus(i);
                a[(bi, bi)] += bus.eta / bus.s_bar;
            }
            let lmax = a
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                lmax < 1.8,
                "lambda_max(C_q + X_cc) = {lmax} too large for h = 1"
            );
        }
    }

    #[test]
    fn chain_entrywise_positive() {
        let net = chain(10, 5);
        let x = net.x_matrix();
        for i in 0..10 {
            for j in 0..10 {
                assert!(x[(i, j)] > 0.0);
            }
        }
        assert!(min_eig_sym(x) > 0.0);
    }

    #[test]
    fn star2_decoupled() {
        let net = star2(9);
        assert_eq!(net.x_matrix()[(0, 1)], 0.0);
    }
}
