//! Acceptance suite: one test per shipped guarantee, each printing a
//! PASS line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! 1. output agreement under the decentralized monotone-PI design
//! 2. steady-state optimality under the communicating design
//! 3. Lyapunov decrement monitoring with dt-scaling of the residual
//! 4. monotone interpolation accuracy
//! 5. BPTT gradient correctness against central finite differences
//! 6. training reduces the transient cost and beats unit-gain linear PI
//! 7. communication cross-term sign sampling
//! 8. closed-loop equilibrium residuals and the balance-sign regression
//! 9. structural monotonicity fuzz and post-training constraint checks

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neuralpi_core::analysis::{
    analytic_equilibrium, closed_loop_deriv_inf_norm, k_x_inverse, kkt_residual,
    lyapunov_decrement, reference_equilibrium, Equilibrium,
};
use neuralpi_core::control::{Controller, CostFamily, IntegralFn, Phi};
use neuralpi_core::dynamics::{
    power_network, rollout, vehicle_platoon, NodeModel, Scheme, SystemModel, SystemState,
    Trajectory,
};
use neuralpi_core::graph::Graph;
use neuralpi_core::monotone::{interpolate_monotone, MonotoneParams, MonotoneWeights};
use neuralpi_core::train::{
    bptt_grad, gen_scenarios, train, transient_loss, LossSpec, Scenario, ScenarioSpec,
    TrainConfig, TrainTarget,
};

const YBAR: f64 = 5.2;

fn banded_comm_controller(
    n: usize,
    d: usize,
    seed: u64,
    comm: Graph,
    cost: CostFamily,
    phi: Phi,
) -> Controller {
    Controller::NeuralPiComm {
        p_fns: (0..n)
            .map(|i| MonotoneParams::init_banded(d, seed + 2 * i as u64, 0.5, 1.5))
            .collect(),
        r_fns: (0..n)
            .map(|i| MonotoneParams::init_banded(d, seed + 2 * i as u64 + 1, 0.5, 1.5))
            .collect(),
        comm,
        cost,
        phi,
    }
}

fn agreement_error(traj: &Trajectory, y_bar: f64) -> f64 {
    traj.final_outputs()
        .iter()
        .map(|&y| (y - y_bar).abs())
        .fold(0.0, f64::max)
}

/// Criterion-1 configuration: vehicle platoon, line graph, randomly
/// initialized monotone PI, 20 initial conditions.
fn criterion1_setup() -> (SystemModel, Controller, Vec<Scenario>) {
    let model = vehicle_platoon(Graph::line(5).unwrap(), YBAR, 101, 8, 1.0).unwrap();
    let ctrl = Controller::neural_pi(5, 10, 102, 1.0);
    let scens = gen_scenarios(
        &model,
        &ScenarioSpec::Vehicle {
            x0_low: 5.0,
            x0_high: 6.0,
            eta0: 2.0,
        },
        20,
        103,
    )
    .unwrap();
    (model, ctrl, scens)
}

#[test]
fn criterion_1_output_agreement() {
    let started = Instant::now();
    let (model, ctrl, scens) = criterion1_setup();
    let mut worst = 0.0f64;
    for scen in &scens {
        let traj = rollout(
            &model, &ctrl, &scen.x0, &scen.eta0, &scen.s0, 2000, 0.02, Scheme::Rk4,
        )
        .unwrap();
        assert!(traj.range_violations.is_empty());
        let initial = traj
            .outputs(0)
            .iter()
            .map(|&y| (y - YBAR).abs())
            .fold(0.0, f64::max);
        let err = agreement_error(&traj, YBAR);
        assert!(err < initial, "agreement error did not shrink: {err} vs {initial}");
        worst = worst.max(err);
    }
    assert!(worst <= 1e-2, "worst agreement error {worst} exceeds 1e-2");
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 10.0, "runtime {elapsed:?} over budget");
    println!(
        "acceptance criterion 1 (output agreement): PASS (worst error {worst:.3e}, {elapsed:?})"
    );
}

/// Criterion-2 vehicle configuration: communicating design, quadratic costs.
fn criterion2_vehicle() -> (SystemModel, Controller, CostFamily, Equilibrium, Trajectory) {
    let model = vehicle_platoon(Graph::line(5).unwrap(), YBAR, 201, 8, 1.0).unwrap();
    let cost = CostFamily::random(2, 5, 0.5, 1.5, 202).unwrap();
    let ctrl = banded_comm_controller(
        5,
        8,
        203,
        Graph::line(5).unwrap(),
        cost.clone(),
        Phi::Identity,
    );
    let eq = analytic_equilibrium(&model, &ctrl, &cost, YBAR).unwrap();
    let traj = rollout(
        &model,
        &ctrl,
        &[5.1, 5.9, 5.3, 5.6, 5.45],
        &[2.0; 4],
        &[0.0; 5],
        15_000,
        0.02,
        Scheme::Rk4,
    )
    .unwrap();
    (model, ctrl, cost, eq, traj)
}

/// Criterion-2 power configurations: quartic costs, step load changes.
fn criterion2_power() -> Vec<(SystemModel, Controller, CostFamily, Equilibrium, Trajectory)> {
    let base = power_network(Graph::line(5).unwrap(), 60.0, 204, 8.0).unwrap();
    let cost = CostFamily::random(4, 5, 0.5, 1.5, 205).unwrap();
    let ctrl = banded_comm_controller(
        5,
        8,
        206,
        Graph::line(5).unwrap(),
        cost.clone(),
        Phi::Identity,
    );
    let scens = gen_scenarios(
        &base,
        &ScenarioSpec::Power {
            max_changes: 3,
            delta_low: -1.0,
            delta_high: 1.0,
        },
        2,
        207,
    )
    .unwrap();
    scens
        .iter()
        .map(|scen| {
            let model = base.with_load_delta(&scen.load_delta).unwrap();
            let eq = analytic_equilibrium(&model, &ctrl, &cost, 60.0).unwrap();
            let traj = rollout(
                &model, &ctrl, &scen.x0, &scen.eta0, &scen.s0, 30_000, 0.01, Scheme::Rk4,
            )
            .unwrap();
            (model, ctrl.clone(), cost.clone(), eq, traj)
        })
        .collect()
}

#[test]
fn criterion_2_steady_state_optimality() {
    let started = Instant::now();
    let (model, _, cost, eq, traj) = criterion2_vehicle();
    let w_end = &traj.controls[traj.steps()];
    let w_err = w_end
        .iter()
        .zip(&eq.w_star)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(w_err <= 1e-3, "vehicle |w(T) - w*| = {w_err}");
    let res = kkt_residual(&cost, w_end, &model, YBAR).unwrap();
    assert!(res.spread <= 1e-3, "vehicle marginal spread {}", res.spread);

    for (model, _, cost, eq, traj) in criterion2_power() {
        let net_load: f64 = model
            .nodes
            .iter()
            .map(|node| match *node {
                NodeModel::Power { p_m, load, .. } => load - p_m,
                _ => unreachable!(),
            })
            .sum();
        let balance = (eq.w_star.iter().sum::<f64>() - net_load).abs();
        assert!(balance <= 1e-9, "power balance residual {balance}");
        assert!(traj.range_violations.is_empty());
        let w_end = &traj.controls[traj.steps()];
        let res = kkt_residual(&cost, w_end, &model, 60.0).unwrap();
        assert!(res.spread <= 1e-3, "power marginal spread {}", res.spread);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 20.0, "runtime {elapsed:?} over budget");
    println!("acceptance criterion 2 (steady-state optimality): PASS ({elapsed:?})");
}

#[test]
fn criterion_3_lyapunov_decrement() {
    // Zero violations of the dissipation bound (tolerance 0.05 dt max(V0, 1))
    // along every criterion-1/2 trajectory, and the worst discretization
    // residual of the monitor scales linearly when dt is halved.
    let (model, ctrl, scens) = criterion1_setup();
    let design1_eq = reference_equilibrium(&model, &ctrl).unwrap();
    let mut worst_full = 0.0f64;
    let mut worst_half = 0.0f64;
    for scen in &scens {
        let full = rollout(
            &model, &ctrl, &scen.x0, &scen.eta0, &scen.s0, 2000, 0.02, Scheme::Rk4,
        )
        .unwrap();
        let report = lyapunov_decrement(&full, &model, &ctrl, &design1_eq, 0.05).unwrap();
        assert!(
            report.violations.is_empty(),
            "bound violations at steps {:?}",
            &report.violations
        );
        worst_full = worst_full.max(report.worst_discretization_residual);

        let half = rollout(
            &model, &ctrl, &scen.x0, &scen.eta0, &scen.s0, 4000, 0.01, Scheme::Rk4,
        )
        .unwrap();
        let report = lyapunov_decrement(&half, &model, &ctrl, &design1_eq, 0.05).unwrap();
        assert!(report.violations.is_empty());
        worst_half = worst_half.max(report.worst_discretization_residual);
    }
    let ratio = worst_full / worst_half;
    assert!(
        (1.6..=2.4).contains(&ratio),
        "dt-halving residual ratio {ratio} outside [1.6, 2.4]"
    );

    let (model, ctrl, _, eq, traj) = criterion2_vehicle();
    let report = lyapunov_decrement(&traj, &model, &ctrl, &eq, 0.05).unwrap();
    assert!(report.violations.is_empty());
    for (model, ctrl, _, eq, traj) in criterion2_power() {
        let report = lyapunov_decrement(&traj, &model, &ctrl, &eq, 0.05).unwrap();
        assert!(report.violations.is_empty());
    }
    println!(
        "acceptance criterion 3 (Lyapunov decrement): PASS (halving ratio {ratio:.2})"
    );
}

#[test]
fn criterion_4_monotone_approximation() {
    let started = Instant::now();
    // tanh on [-3, 3], 100 neurons per side, grid spacing 0.03: interpolation
    // error at most L * tau on a 10x denser grid.
    let d = 100;
    let tau = 0.03;
    let zs: Vec<f64> = (-(d as i64)..=(d as i64)).map(|k| k as f64 * tau).collect();
    let rs: Vec<f64> = zs.iter().map(|&z| z.tanh()).collect();
    let w = interpolate_monotone(&zs, &rs, d).unwrap().materialize();
    let dense = 10 * 2 * d;
    let mut sup = 0.0f64;
    for k in 0..=dense {
        let z = -3.0 + 6.0 * k as f64 / dense as f64;
        sup = sup.max((w.forward(z) - z.tanh()).abs());
    }
    assert!(sup <= 0.03, "tanh interpolation sup error {sup}");

    // Linear target reproduced to machine precision.
    let rs = zs.clone();
    let w = interpolate_monotone(&zs, &rs, d).unwrap().materialize();
    let mut sup_lin = 0.0f64;
    for k in 0..=dense {
        let z = -3.0 + 6.0 * k as f64 / dense as f64;
        sup_lin = sup_lin.max((w.forward(z) - z).abs());
    }
    assert!(sup_lin <= 1e-12, "identity interpolation error {sup_lin}");
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 1.0, "runtime {elapsed:?} over budget");
    println!(
        "acceptance criterion 4 (monotone approximation): PASS (sup {sup:.4}, linear {sup_lin:.1e})"
    );
}

fn fd_check_controller(
    model: &SystemModel,
    ctrl: &Controller,
    spec: &LossSpec,
    scens: &[Scenario],
    label: &str,
) {
    let out = bptt_grad(model, ctrl, spec, scens, 20, 0.02, TrainTarget::Controller).unwrap();
    let base = ctrl.params_flat();
    let h = 1e-5;
    let eval = |c: &Controller| -> f64 {
        scens
            .iter()
            .map(|s| {
                let t = rollout(model, c, &s.x0, &s.eta0, &s.s0, 20, 0.02, Scheme::Euler).unwrap();
                transient_loss(&t, spec)
            })
            .sum::<f64>()
            / scens.len() as f64
    };
    for i in 0..base.len() {
        let mut cp = ctrl.clone();
        let mut cm = ctrl.clone();
        let mut flat = base.clone();
        flat[i] += h;
        cp.set_params_flat(&flat).unwrap();
        flat[i] -= 2.0 * h;
        cm.set_params_flat(&flat).unwrap();
        let fd = (eval(&cp) - eval(&cm)) / (2.0 * h);
        let err = (out.grad[i] - fd).abs();
        assert!(
            err <= 1e-8f64.max(1e-4 * fd.abs()),
            "{label} param {i}: bptt {} vs fd {}",
            out.grad[i],
            fd
        );
    }
}

#[test]
fn criterion_5_gradient_correctness() {
    let started = Instant::now();
    let scens = vec![
        Scenario {
            x0: vec![5.31, 5.87, 5.12],
            eta0: vec![2.0, 2.0],
            s0: vec![0.0; 3],
            load_delta: vec![0.0; 3],
        },
        Scenario {
            x0: vec![5.64, 5.23, 5.71],
            eta0: vec![2.0, 2.0],
            s0: vec![0.0; 3],
            load_delta: vec![0.0; 3],
        },
    ];
    let spec = LossSpec::VehicleTracking {
        coeffs: vec![0.05, 0.031, 0.07],
    };

    // (a) decentralized monotone PI.
    let model = vehicle_platoon(Graph::line(3).unwrap(), YBAR, 41, 6, 0.8).unwrap();
    let ctrl = Controller::neural_pi(3, 6, 42, 0.8);
    fd_check_controller(&model, &ctrl, &spec, &scens, "design1");

    // (b) communicating design, including the consensus term.
    let model = vehicle_platoon(Graph::line(3).unwrap(), YBAR, 43, 6, 0.8).unwrap();
    let ctrl = Controller::neural_pi_comm(
        3,
        6,
        44,
        0.8,
        Graph::ring(3).unwrap(),
        CostFamily::new(2, vec![0.11, 0.06, 0.09]).unwrap(),
        Phi::Identity,
    )
    .unwrap();
    fd_check_controller(&model, &ctrl, &spec, &scens, "design2");

    // (c) learnable edge feedback with the edge-only loss and w = 0.
    let model = vehicle_platoon(Graph::line(3).unwrap(), YBAR, 47, 6, 0.8).unwrap();
    let ctrl = Controller::zero(3);
    let spec = LossSpec::EdgeOnly {
        tail_start: 10,
        action_reg: 0.01,
        min_spacing: 1.0,
    };
    let out = bptt_grad(&model, &ctrl, &spec, &scens, 20, 0.02, TrainTarget::EdgeFunctions)
        .unwrap();
    let base = model.edge_params_flat();
    let h = 1e-5;
    let eval = |m: &SystemModel| -> f64 {
        scens
            .iter()
            .map(|s| {
                let t = rollout(m, &ctrl, &s.x0, &s.eta0, &s.s0, 20, 0.02, Scheme::Euler).unwrap();
                transient_loss(&t, &spec)
            })
            .sum::<f64>()
            / scens.len() as f64
    };
    for i in 0..base.len() {
        let mut mp = model.clone();
        let mut mm = model.clone();
        let mut flat = base.clone();
        flat[i] += h;
        mp.set_edge_params_flat(&flat).unwrap();
        flat[i] -= 2.0 * h;
        mm.set_edge_params_flat(&flat).unwrap();
        let fd = (eval(&mp) - eval(&mm)) / (2.0 * h);
        let err = (out.grad[i] - fd).abs();
        assert!(
            err <= 1e-8f64.max(1e-4 * fd.abs()),
            "edge param {i}: bptt {} vs fd {}",
            out.grad[i],
            fd
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 30.0, "runtime {elapsed:?} over budget");
    println!("acceptance criterion 5 (gradient correctness): PASS ({elapsed:?})");
}

fn criterion6_training() -> (
    SystemModel,
    Controller,
    LossSpec,
    ScenarioSpec,
    neuralpi_core::train::TrainReport,
) {
    let model = vehicle_platoon(Graph::line(5).unwrap(), YBAR, 101, 8, 1.0).unwrap();
    let ctrl = Controller::neural_pi(5, 10, 102, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let coeffs: Vec<f64> = (0..5).map(|_| rng.gen_range(0.025..0.075)).collect();
    let spec = LossSpec::VehicleTracking { coeffs };
    let scen_spec = ScenarioSpec::Vehicle {
        x0_low: 5.0,
        x0_high: 6.0,
        eta0: 2.0,
    };
    let cfg = TrainConfig {
        episodes: 50,
        batch: 16,
        k_steps: 150,
        dt: 0.02,
        lr: 0.05,
        decay_factor: 0.7,
        decay_every: 50,
        seed: 105,
        checkpoint_every: 10,
        target: TrainTarget::Controller,
    };
    let report = train(&model, &ctrl, &spec, &scen_spec, &cfg, |_| Ok(())).unwrap();
    (model, ctrl, spec, scen_spec, report)
}

#[test]
fn criterion_6_training_improves_transient_cost() {
    let started = Instant::now();
    let (model, init_ctrl, spec, scen_spec, report) = criterion6_training();
    let first = report.history.first().unwrap().mean_loss;
    let last = report.history.last().unwrap().mean_loss;
    assert!(
        last < first,
        "training did not improve: first {first}, last {last}"
    );

    // Held-out comparison against unit-gain linear PI.
    let held = gen_scenarios(&model, &scen_spec, 20, 106).unwrap();
    let eval = |c: &Controller| -> f64 {
        held.iter()
            .map(|s| {
                let t = rollout(&model, c, &s.x0, &s.eta0, &s.s0, 150, 0.02, Scheme::Euler)
                    .unwrap();
                transient_loss(&t, &spec)
            })
            .sum::<f64>()
            / held.len() as f64
    };
    let trained = eval(&report.controller);
    let linear = eval(&Controller::linear_unit(5));
    assert!(
        trained <= linear,
        "trained loss {trained} exceeds unit-gain linear PI {linear}"
    );
    let _ = init_ctrl;
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 300.0, "runtime {elapsed:?} over budget");
    println!(
        "acceptance criterion 6 (training improvement): PASS (loss {first:.1} -> {last:.1}; held-out {trained:.1} vs linear {linear:.1}; {elapsed:?})"
    );
}

/// Bisection inverse of an integral function (oracle-side helper).
fn invert(f: &IntegralFn<'_>, target: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while f.eval(lo) > target {
        lo *= 2.0;
    }
    while f.eval(hi) < target {
        hi *= 2.0;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            return mid;
        }
        if f.eval(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

#[test]
fn criterion_7_cross_term_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    for draw in 0..1000u64 {
        let n = rng.gen_range(2usize..7);
        let comm = match rng.gen_range(0u8..3) {
            0 => Graph::line(n).unwrap(),
            1 if n >= 3 => Graph::ring(n).unwrap(),
            _ => Graph::complete(n).unwrap(),
        };
        let p = if rng.gen::<bool>() { 2 } else { 4 };
        let cost = CostFamily::random(p, n, 0.5, 1.5, 700_000 + draw).unwrap();
        let phi = if rng.gen::<bool>() { Phi::Identity } else { Phi::Tanh };
        let ctrl = banded_comm_controller(n, 5, 710_000 + 16 * draw, comm, cost.clone(), phi);
        let eval = ctrl.compile();
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = vec![0.0; n];
        // At y = ybar the integral derivative is exactly minus the
        // communication term.
        let ds = eval.s_deriv(&y, 0.0, &s);
        let inner: f64 = (0..n)
            .map(|i| eval.integral_fn(i).unwrap().eval(s[i]) * -ds[i])
            .sum();
        assert!(inner >= -1e-12, "draw {draw}: cross term {inner}");

        // Constructed equal-marginal state: the term vanishes identically.
        let lambda = rng.gen_range(-2.0..2.0);
        let s_eq: Vec<f64> = (0..n)
            .map(|i| {
                let target = cost.marginal_inverse(i, lambda);
                invert(&eval.integral_fn(i).unwrap(), target)
            })
            .collect();
        let ds = eval.s_deriv(&y, 0.0, &s_eq);
        let comm_inf = ds.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(comm_inf <= 1e-12, "draw {draw}: comm term {comm_inf}");
    }
    println!("acceptance criterion 7 (cross-term sign sampling): PASS (1000 draws)");
}

#[test]
fn criterion_8_equilibrium_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut checked_sign = 0usize;
    for inst in 0..100u64 {
        let n = rng.gen_range(3usize..8);
        let graph = if rng.gen::<bool>() {
            Graph::line(n).unwrap()
        } else {
            Graph::ring(n).unwrap()
        };
        let power = inst % 2 == 1;
        let model = if power {
            let base = power_network(graph.clone(), 60.0, 800_000 + inst, 8.0).unwrap();
            let mut delta = vec![0.0; n];
            for _ in 0..3 {
                delta[rng.gen_range(0..n)] = rng.gen_range(-0.8..0.8);
            }
            base.with_load_delta(&delta).unwrap()
        } else {
            vehicle_platoon(graph.clone(), YBAR, 800_000 + inst, 6, 1.0).unwrap()
        };
        let y_bar = model.y_bar;
        let p = if rng.gen::<bool>() { 2 } else { 4 };
        let cost = CostFamily::random(p, n, 0.5, 1.5, 810_000 + inst).unwrap();
        let ctrl = banded_comm_controller(
            n,
            6,
            820_000 + 16 * inst,
            graph,
            cost.clone(),
            Phi::Identity,
        );
        let eq = analytic_equilibrium(&model, &ctrl, &cost, y_bar).unwrap();
        let state = SystemState {
            x: eq.x_star.clone(),
            eta: eq.eta_star.clone(),
            s: eq.s_star.clone(),
        };
        let residual = closed_loop_deriv_inf_norm(&model, &ctrl, &state).unwrap();
        assert!(residual <= 1e-9, "instance {inst}: residual {residual}");

        // Independent route: bisection on the common marginal level lambda
        // with sum_i gradC_i^{-1}(lambda) = 1^T k_x^{-1}.
        let net: f64 = model
            .nodes
            .iter()
            .map(|node| k_x_inverse(node, y_bar))
            .sum();
        let total = |lambda: f64| -> f64 {
            (0..n).map(|i| cost.marginal_inverse(i, lambda)).sum::<f64>()
        };
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        while total(lo) > net {
            lo *= 2.0;
        }
        while total(hi) < net {
            hi *= 2.0;
        }
        loop {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if total(mid) < net {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lambda = 0.5 * (lo + hi);
        for i in 0..n {
            let w_oracle = cost.marginal_inverse(i, lambda);
            assert!(
                (w_oracle - eq.w_star[i]).abs() <= 1e-8,
                "instance {inst}: KKT oracle w[{i}] = {w_oracle} vs analytic {}",
                eq.w_star[i]
            );
        }

        // Flipping the sign of the marginal-level equation breaks the network
        // balance identity whenever the net equilibrium input is nonzero.
        let kxinv_sum: f64 = model
            .nodes
            .iter()
            .map(|node| k_x_inverse(node, y_bar))
            .sum();
        if kxinv_sum.abs() > 1e-6 {
            let c_hat = cost.scaling_factors();
            let gco_inv: f64 = -kxinv_sum / c_hat.iter().map(|&c| 1.0 / c).sum::<f64>();
            let w_flipped: Vec<f64> = c_hat.iter().map(|&c| gco_inv / c).collect();
            let res = kkt_residual(&cost, &w_flipped, &model, y_bar).unwrap();
            assert!(
                res.balance >= kxinv_sum.abs(),
                "instance {inst}: flipped-sign balance {} unexpectedly small",
                res.balance
            );
            checked_sign += 1;
        }
    }
    assert!(checked_sign >= 90, "only {checked_sign} sign-regression instances");
    println!(
        "acceptance criterion 8 (equilibrium residuals): PASS (100 instances, {checked_sign} sign checks)"
    );
}

fn assert_constrained(w: &MonotoneWeights) {
    assert_eq!(w.beta_plus[0], 0.0);
    assert_eq!(w.beta_minus[0], 0.0);
    let d = w.neurons();
    for j in 1..d {
        assert!(w.beta_plus[j] >= w.beta_plus[j - 1]);
        assert!(w.beta_minus[j] <= w.beta_minus[j - 1]);
    }
    let (mut sp, mut sm) = (0.0, 0.0);
    for j in 0..d {
        sp += w.alpha_plus[j];
        sm += w.alpha_minus[j];
        assert!(sp >= -1e-12, "plus partial sum {sp}");
        assert!(sm <= 1e-12, "minus partial sum {sm}");
    }
}

#[test]
fn criterion_9_structural_guarantees() {
    // One million monotonicity draws over random parameterizations.
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut params = MonotoneParams::zeros(8, 0.0);
    for draw in 0..1_000_000u64 {
        let d = 1 + (draw % 8) as usize;
        params.alpha_plus.resize(d, 0.0);
        params.alpha_minus.resize(d, 0.0);
        params.beta_plus.resize(d - 1, 0.0);
        params.beta_minus.resize(d - 1, 0.0);
        for v in params
            .alpha_plus
            .iter_mut()
            .chain(params.alpha_minus.iter_mut())
        {
            *v = rng.gen_range(-2.0..2.0);
        }
        for v in params
            .beta_plus
            .iter_mut()
            .chain(params.beta_minus.iter_mut())
        {
            *v = rng.gen_range(-1.0..1.0);
        }
        params.slope_floor = if draw % 2 == 0 { 0.0 } else { 1e-6 };
        let w = params.materialize();
        let a = rng.gen_range(-6.0..6.0);
        let b = rng.gen_range(-6.0..6.0);
        let (z1, z2) = if a <= b { (a, b) } else { (b, a) };
        let diff = w.forward(z2) - w.forward(z1);
        assert!(
            diff >= w.slope_floor * (z2 - z1) - 1e-12,
            "draw {draw}: g({z2}) - g({z1}) = {diff}"
        );
    }

    // Every training checkpoint still satisfies the weight constraints.
    let (_, _, _, _, report) = criterion6_training();
    assert!(!report.checkpoints.is_empty());
    for cp in &report.checkpoints {
        match &cp.controller {
            Controller::NeuralPi { p_fns, r_fns }
            | Controller::NeuralPiComm { p_fns, r_fns, .. } => {
                for f in p_fns.iter().chain(r_fns.iter()) {
                    assert_constrained(&f.materialize());
                }
            }
            _ => panic!("criterion 6 trains a monotone controller"),
        }
        for f in &cp.edge_params {
            assert_constrained(&f.materialize());
        }
    }
    println!(
        "acceptance criterion 9 (structural guarantees): PASS (1e6 draws, {} checkpoints)",
        report.checkpoints.len()
    );
}
