//! Property-based invariants: incidence algebra, monotone-network structure,
//! Bregman positivity, per-node passivity identities, and the communication
//! cross-term sign.

use proptest::prelude::*;

use neuralpi_core::analysis::bregman;
use neuralpi_core::control::{Controller, CostFamily, Phi};
use neuralpi_core::dynamics::{NodeModel, SystemModel};
use neuralpi_core::graph::Graph;
use neuralpi_core::monotone::{interpolate_monotone, MonotoneParams};

fn arb_graph() -> impl Strategy<Value = Graph> {
    (2usize..8, any::<u64>()).prop_map(|(n, seed)| match seed % 3 {
        0 => Graph::line(n).unwrap(),
        1 if n >= 3 => Graph::ring(n).unwrap(),
        _ => Graph::complete(n).unwrap(),
    })
}

proptest! {
    // Dyadic edge values with a shared scale make the +1/-1 cancellation
    // exact; the node-sum of E v must then be exactly zero.
    #[test]
    fn incidence_node_sums_vanish_exactly(graph in arb_graph(), raw in prop::collection::vec(-1600i64..1600, 0..32)) {
        let vals: Vec<f64> = (0..graph.m()).map(|l| raw.get(l).copied().unwrap_or(7) as f64 / 16.0).collect();
        let injected = graph.apply_incidence(&vals).unwrap();
        let total: f64 = injected.iter().sum();
        prop_assert_eq!(total, 0.0);
    }

    #[test]
    fn transpose_of_constants_vanishes(graph in arb_graph(), c in -1e6f64..1e6) {
        let diffs = graph.apply_transpose(&vec![c; graph.n()]).unwrap();
        prop_assert!(diffs.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn random_regular_is_reproducible(seed in any::<u64>()) {
        let a = Graph::random_regular(8, 3, seed).unwrap();
        let b = Graph::random_regular(8, 3, seed).unwrap();
        prop_assert_eq!(a.edges(), b.edges());
    }

    // Materialized weights satisfy the ordering and prefix-sum constraints
    // for arbitrary raw parameters.
    #[test]
    fn materialize_always_satisfies_constraints(
        seed in any::<u64>(),
        d in 1usize..9,
        scale in 0.0f64..3.0,
    ) {
        let w = MonotoneParams::init(d, seed, scale).materialize();
        prop_assert_eq!(w.beta_plus[0], 0.0);
        prop_assert_eq!(w.beta_minus[0], 0.0);
        for j in 1..d {
            prop_assert!(w.beta_plus[j] >= w.beta_plus[j - 1]);
            prop_assert!(w.beta_minus[j] <= w.beta_minus[j - 1]);
        }
        let mut sum_p = 0.0;
        let mut sum_m = 0.0;
        for j in 0..d {
            sum_p += w.alpha_plus[j];
            sum_m += w.alpha_minus[j];
            prop_assert!(sum_p >= -1e-12);
            prop_assert!(sum_m <= 1e-12);
        }
    }

    #[test]
    fn monotone_in_input_with_floor_margin(
        seed in any::<u64>(),
        d in 1usize..9,
        scale in 0.0f64..3.0,
        z1 in -8.0f64..8.0,
        gap in 1e-6f64..8.0,
    ) {
        let w = MonotoneParams::init(d, seed, scale).materialize();
        let z2 = z1 + gap;
        let (g1, g2) = (w.forward(z1), w.forward(z2));
        prop_assert!(g2 - g1 >= w.slope_floor * gap - 1e-12);
        prop_assert_eq!(w.forward(0.0), 0.0);
    }

    #[test]
    fn bregman_is_positive_definite(
        seed in any::<u64>(),
        d in 1usize..9,
        v in -5.0f64..5.0,
        v_star in -5.0f64..5.0,
    ) {
        let w = MonotoneParams::init(d, seed, 1.0).materialize();
        let b = bregman(&w, v, v_star);
        prop_assert!(b >= 0.0);
        if (v - v_star).abs() > 1e-6 {
            // Strict positivity thanks to the slope floor.
            prop_assert!(b > 0.0);
        }
        prop_assert_eq!(bregman(&w, v, v), 0.0);
    }

    // The sine and linear integral families satisfy the same Bregman
    // positivity on their monotone ranges.
    #[test]
    fn bregman_of_sine_and_linear_families(
        b in 0.5f64..10.0,
        gain in 0.1f64..5.0,
        v in -1.5f64..1.5,
        v_star in -1.5f64..1.5,
    ) {
        use neuralpi_core::control::IntegralFn;
        use neuralpi_core::dynamics::EdgeEval;
        let sine = EdgeEval::Sine { b };
        let dist = bregman(&sine, v, v_star);
        prop_assert!(dist >= 0.0);
        if (v - v_star).abs() > 1e-6 {
            prop_assert!(dist > 0.0);
        }
        let lin = IntegralFn::Linear(gain);
        let dist = bregman(&lin, v, v_star);
        let expect = 0.5 * gain * (v - v_star) * (v - v_star);
        prop_assert!((dist - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    // Every shipped loss family is nonnegative on arbitrary rollouts.
    #[test]
    fn losses_are_nonnegative(seed in any::<u64>(), x0 in prop::collection::vec(4.5f64..6.5, 3)) {
        use neuralpi_core::dynamics::{rollout, vehicle_platoon, Scheme};
        use neuralpi_core::train::{transient_loss, LossSpec};
        let model = vehicle_platoon(Graph::line(3).unwrap(), 5.2, seed, 4, 1.0).unwrap();
        let ctrl = Controller::neural_pi(3, 4, seed ^ 0x55, 1.0);
        let traj = rollout(&model, &ctrl, &x0, &[2.0, 2.0], &[0.0; 3], 30, 0.02, Scheme::Euler)
            .unwrap();
        for spec in [
            LossSpec::VehicleTracking { coeffs: vec![0.05; 3] },
            LossSpec::PowerTracking { coeffs: vec![0.5; 3], abs_weight: 0.05 },
            LossSpec::EdgeOnly { tail_start: 10, action_reg: 0.01, min_spacing: 1.0 },
        ] {
            prop_assert!(transient_loss(&traj, &spec) >= 0.0);
        }
    }

    // Strict-EIP storage identity: W' = -rho (y - y*)^2 + (y - y*)(u - u*)
    // holds exactly for both node families at any state/input pair.
    #[test]
    fn node_families_satisfy_strict_eip_identity(
        x in -10.0f64..80.0,
        u in -5.0f64..5.0,
        u_star in -5.0f64..5.0,
        kappa in 0.2f64..3.0,
        v1 in 0.3f64..2.0,
        rho in 0.3f64..3.0,
    ) {
        let vehicle = NodeModel::Vehicle { kappa, v0: 5.0, v1 };
        let x_star = 5.0 + v1 * u_star; // k_x(u*)
        let w_dot = vehicle.storage_grad(x, x_star) * vehicle.deriv(x, u);
        let rhs = -vehicle.eip_rho() * (x - x_star) * (x - x_star) + (x - x_star) * (u - u_star);
        prop_assert!((w_dot - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));

        let power = NodeModel::Power { rho, p_m: 1.0, load: 1.3, x_bar: 60.0 };
        let x_star = 60.0 + (1.0 - 1.3 + u_star) / rho;
        let w_dot = power.storage_grad(x, x_star) * power.deriv(x, u);
        let rhs = -power.eip_rho() * (x - x_star) * (x - x_star) + (x - x_star) * (u - u_star);
        prop_assert!((w_dot - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    // Communication cross term: r(s)^T (chat .* E~ phi(E~^T gradC(r(s)))) >= 0.
    #[test]
    fn comm_cross_term_is_nonnegative(
        seed in any::<u64>(),
        n in 2usize..7,
        p4 in any::<bool>(),
        tanh in any::<bool>(),
        s in prop::collection::vec(-2.0f64..2.0, 7),
    ) {
        let comm = if n >= 3 && seed % 2 == 0 { Graph::ring(n).unwrap() } else { Graph::line(n).unwrap() };
        let cost = CostFamily::random(if p4 { 4 } else { 2 }, n, 0.5, 1.5, seed).unwrap();
        let phi = if tanh { Phi::Tanh } else { Phi::Identity };
        let ctrl = Controller::neural_pi_comm(n, 5, seed ^ 0xabc, 1.0, comm.clone(), cost.clone(), phi).unwrap();
        let s = &s[..n];
        let eval = ctrl.compile();
        let y = vec![0.0; n];
        // s' = -(y - ybar) - term, with y = ybar: term = -s'.
        let ds = eval.s_deriv(&y, 0.0, s);
        let r_of_s: Vec<f64> = (0..n).map(|i| eval.integral_fn(i).unwrap().eval(s[i])).collect();
        let inner: f64 = r_of_s.iter().zip(&ds).map(|(&r, &d)| r * -d).sum();
        prop_assert!(inner >= -1e-12, "cross term inner product {inner}");
    }

    // Interpolation reproduces monotone samples exactly and stays within the
    // Lipschitz bound between them.
    #[test]
    fn interpolation_respects_lipschitz_bound(seed in any::<u64>(), steps in 4usize..20) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tau = 0.25;
        let half = steps as i64;
        let zs: Vec<f64> = (-half..=half).map(|k| k as f64 * tau).collect();
        // Random nondecreasing samples through the origin with slopes <= L.
        let lipschitz = 2.0;
        let mut rs = vec![0.0; zs.len()];
        let origin = steps;
        for k in origin + 1..zs.len() {
            rs[k] = rs[k - 1] + rng.gen_range(0.0..lipschitz) * tau;
        }
        for k in (0..origin).rev() {
            rs[k] = rs[k + 1] - rng.gen_range(0.0..lipschitz) * tau;
        }
        let w = interpolate_monotone(&zs, &rs, zs.len()).unwrap().materialize();
        for (z, r) in zs.iter().zip(&rs) {
            prop_assert!((w.forward(*z) - r).abs() <= 1e-9);
        }
    }
}

#[test]
fn system_model_rejects_mismatched_shapes() {
    let graph = Graph::line(3).unwrap();
    let nodes = vec![
        NodeModel::Vehicle {
            kappa: 1.0,
            v0: 5.0,
            v1: 1.0
        };
        2
    ];
    assert!(SystemModel::new(graph, nodes, vec![], 5.2).is_err());
}
