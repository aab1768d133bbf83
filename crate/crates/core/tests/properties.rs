//! Randomized invariants (proptest).

use nalgebra::DVector;
use proptest::prelude::*;

use tasrl_core::controller::{barrier, clamp_rate};
use tasrl_core::feeders;
use tasrl_core::grid::voltage;
use tasrl_core::policy::{policy_eval, PolicyParams};
use tasrl_core::grid::Bus;

fn test_bus() -> Bus {
    Bus {
        id: 1,
        p: 0.0,
        q_min: -1.0,
        q_max: 1.0,
        v_nom: 1.0,
        v_lo: 0.95,
        v_hi: 1.05,
        eta: 0.1,
        s_bar: 0.5,
    }
}

proptest! {
    /// The safe rate keeps the Euler step inside the box for any h*alpha <= 1
    /// and equals the raw rate bit-for-bit when it is feasible.
    #[test]
    fn clamped_rate_is_safe_and_minimal(
        raw in -5.0f64..5.0,
        q in -0.999f64..0.999,
        alpha in 0.01f64..1.0,
        h_frac in 0.01f64..1.0,
    ) {
        let (q_lo, q_hi) = (-1.0, 1.0);
        let (xi, clipped) = clamp_rate(raw, q, q_lo, q_hi, alpha);
        // rate bounds hold exactly
        prop_assert!(xi <= alpha * (q_hi - q));
        prop_assert!(-xi <= alpha * (q - q_lo));
        // minimal modification
        if !clipped {
            prop_assert_eq!(xi, raw);
        }
        // discrete forward invariance
        let h = h_frac / alpha;
        let q_next = q + h * xi;
        prop_assert!(q_next >= q_lo - 4.0 * f64::EPSILON && q_next <= q_hi + 4.0 * f64::EPSILON);
    }

    /// Barrier stack is nonpositive exactly on the box.
    #[test]
    fn barrier_characterizes_the_box(q in prop::collection::vec(-2.0f64..2.0, 1..6)) {
        let n = q.len();
        let qv = DVector::from_vec(q.clone());
        let lo = DVector::from_element(n, -1.0);
        let hi = DVector::from_element(n, 1.0);
        let g = barrier(&qv, &lo, &hi).unwrap();
        let inside = q.iter().all(|&x| (-1.0..=1.0).contains(&x));
        prop_assert_eq!(g.max() <= 0.0, inside);
    }

    /// Policy deadband and bounds hold for arbitrary draws in the shrunk box.
    #[test]
    fn policy_deadband_and_bounds(
        seed in 0u64..1000,
        v in 0.5f64..1.5,
        q_frac in -0.999f64..0.999,
    ) {
        let bus = test_bus();
        let params = PolicyParams::random(1, 6, 0.5, 0.1, -2.0, 2.0, seed);
        let lo = bus.q_min * (1.0 - params.epsilon);
        let hi = bus.q_max * (1.0 - params.epsilon);
        let q = 0.5 * (lo + hi) + 0.5 * q_frac * (hi - lo);
        let pi = policy_eval(&params, 0, &bus, 0.5, v, q);
        if v >= bus.v_lo && v <= bus.v_hi {
            prop_assert_eq!(pi, 0.0);
        }
        prop_assert!(pi >= 0.5 * 0.5 * (lo - q) - 1e-12);
        prop_assert!(pi <= 0.5 * 0.5 * (hi - q) + 1e-12);
    }

    /// The voltage map is affine with the cached reactance as its Jacobian.
    #[test]
    fn voltage_map_is_affine(
        scale in -1.0f64..1.0,
        shift in 0.9f64..1.1,
    ) {
        let net = feeders::chain(5, 3);
        let q0 = DVector::from_element(5, 0.1);
        let v_env = DVector::from_element(5, shift);
        let a = voltage(&net, &(&q0 * scale), &v_env).unwrap();
        let expected = net.x_matrix() * (&q0 * scale) + &v_env;
        prop_assert!((a - expected).amax() < 1e-14);
    }
}
