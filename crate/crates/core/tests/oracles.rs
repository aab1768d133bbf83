//! Cross-module oracles that recompute results through independent routes.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tasrl_core::controller::{Controller, ControllerConfig, ControllerVariant};
use tasrl_core::feeders;
use tasrl_core::grid::{env_voltage, voltage, Network};
use tasrl_core::policy::PolicyParams;
use tasrl_core::sim::{generate_scenarios, run_episode, ScenarioKind};
use tasrl_core::steady_state::SteadyStateProblem;

/// Linearized branch-flow recursion: line flows collect downstream
/// injections, voltages drop from the substation outward. Independent of the
/// path-intersection impedance matrices.
fn recursion_voltage(net: &Network, p: &DVector<f64>, q: &DVector<f64>, v0: f64) -> DVector<f64> {
    let n = net.n();
    // children lists from line orientation toward higher depth
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    let mut parent_line: Vec<Option<usize>> = vec![None; n + 1];
    for (k, line) in net.lines().iter().enumerate() {
        // the line's far end is the one whose root path contains it
        let (near, far) = if net
            .path(line.to_bus - 1)
            .contains(&k)
        {
            (line.from_bus, line.to_bus)
        } else {
            (line.to_bus, line.from_bus)
        };
        children[near].push(far);
        parent_line[far] = Some(k);
    }
    // subtree sums bottom-up
    let mut order: Vec<usize> = Vec::with_capacity(n + 1);
    let mut stack = vec![0usize];
    while let Some(u) = stack.pop() {
        order.push(u);
        for &c in &children[u] {
            stack.push(c);
        }
    }
    let mut sub_p = vec![0.0; n + 1];
    let mut sub_q = vec![0.0; n + 1];
    for &u in order.iter().rev() {
        if u > 0 {
            sub_p[u] += p[u - 1];
            sub_q[u] += q[u - 1];
        }
        for &c in &children[u] {
            sub_p[u] += sub_p[c];
            sub_q[u] += sub_q[c];
        }
    }
    // downstream voltages: v_i = v_parent - 2 (r P + x Q) with the flow into
    // i carrying minus the subtree injections
    let mut v = vec![0.0; n + 1];
    v[0] = v0;
    for &u in &order {
        for &c in &children[u] {
            let k = parent_line[c].unwrap();
            let line = &net.lines()[k];
            let flow_p = -sub_p[c];
            let flow_q = -sub_q[c];
            v[c] = v[u] - 2.0 * (line.r * flow_p + line.x * flow_q);
        }
    }
    DVector::from_iterator(n, (1..=n).map(|i| v[i]))
}

#[test]
fn impedance_map_matches_branch_flow_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for net in [feeders::chain(3, 4), feeders::feeder13(), feeders::feeder123()] {
        for _ in 0..10 {
            let n = net.n();
            let p = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
            let q = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
            let v_env = env_voltage(&net, &p, 1.0).unwrap();
            let direct = voltage(&net, &q, &v_env).unwrap();
            let recursive = recursion_voltage(&net, &p, &q, 1.0);
            assert!(
                (&direct - &recursive).amax() < 1e-12,
                "gap {}",
                (&direct - &recursive).amax()
            );
        }
    }
}

#[test]
fn linear_map_consistency() {
    // voltage(q1 + q2) - voltage(q2) = X q1
    let net = feeders::feeder13();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n = net.n();
        let q1 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let q2 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let v_env = DVector::from_fn(n, |_, _| rng.gen_range(0.9..1.1));
        let a = voltage(&net, &(&q1 + &q2), &v_env).unwrap();
        let b = voltage(&net, &q2, &v_env).unwrap();
        let direct = net.x_matrix() * &q1;
        assert!(((a - b) - direct).amax() < 1e-12);
    }
}

#[test]
fn episode_determinism_is_bitwise() {
    let net = feeders::feeder13();
    let policy = PolicyParams::random(3, 8, 0.5, 0.1, -2.0, 2.0, 3);
    let controller = Controller::new(
        &ControllerConfig::new(0.5, 1.0, ControllerVariant::Tasrl, Some(policy)).unwrap(),
        &net,
    )
    .unwrap();
    let sc = generate_scenarios(&net, ScenarioKind::HighVoltage, (0.05, 0.15), 1, 5, 80)
        .unwrap()
        .remove(0);
    let problem = SteadyStateProblem::new(&net, &sc.v_env_vector()).unwrap();
    let (a, ma) = run_episode(&controller, &problem, &net, &sc, 0.99).unwrap();
    let (b, mb) = run_episode(&controller, &problem, &net, &sc, 0.99).unwrap();
    for t in 0..a.times.len() {
        assert_eq!(a.q[t], b.q[t]);
        assert_eq!(a.v[t], b.v[t]);
        assert_eq!(a.xi[t], b.xi[t]);
    }
    assert_eq!(ma.transient_cost, mb.transient_cost);
}

#[test]
fn converged_equilibria_are_kkt_points() {
    // wherever the control settles to zero with in-band voltage, the
    // projected-gradient residual vanishes
    let net = feeders::feeder13();
    let policy = PolicyParams::random(3, 8, 0.5, 0.1, -2.0, 0.5, 11);
    let controller = Controller::new(
        &ControllerConfig::new(0.5, 1.0, ControllerVariant::Tasrl, Some(policy)).unwrap(),
        &net,
    )
    .unwrap();
    let scenarios =
        generate_scenarios(&net, ScenarioKind::HighVoltage, (0.05, 0.12), 10, 21, 500).unwrap();
    let (v_lo, v_hi) = net.v_band();
    let mut checked = 0;
    for sc in &scenarios {
        let problem = SteadyStateProblem::new(&net, &sc.v_env_vector()).unwrap();
        let (traj, m) = run_episode(&controller, &problem, &net, sc, 0.99).unwrap();
        let v_final = traj.v.last().unwrap();
        let in_band = problem
            .ctrl()
            .iter()
            .all(|&i| v_final[i] >= v_lo[i] && v_final[i] <= v_hi[i]);
        if m.converged && in_band {
            assert!(
                m.final_kkt_residual < 1e-6,
                "residual {} at a settled in-band state",
                m.final_kkt_residual
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "no converged in-band episodes sampled");
}
