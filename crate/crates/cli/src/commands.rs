//! Command implementations shared by the binary and the integration tests.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use neuralpi_core::analysis::{
    analytic_equilibrium, closed_loop_deriv_inf_norm, kkt_residual, lyapunov_decrement,
    reference_equilibrium, steady_metrics, Equilibrium,
};
use neuralpi_core::control::{Controller, CostFamily};
use neuralpi_core::dynamics::{rollout, EdgeModel, Scheme, SystemModel, SystemState, Trajectory};
use neuralpi_core::train::{gen_scenarios, train, transient_loss, Scenario};

use crate::config::ExperimentConfig;
use crate::io::{
    load_controller, save_json, write_loss_history_csv, write_monotone_dump,
    write_trajectory_csv, ControllerFile, Summary,
};

/// Exit codes: 0 pass, 1 check failure, 2 usage/config error, 3 numerical
/// failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub struct CommonArgs {
    pub config: ExperimentConfig,
    pub controller_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub scheme: Option<Scheme>,
    /// Start simulate at the closed-form equilibrium instead of a scenario.
    pub from_equilibrium: bool,
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

/// Resolves the controller and any trained edge functions, either from a
/// file or from the config's initialization.
fn resolve_controller(
    args: &CommonArgs,
    model: &mut SystemModel,
) -> Result<Controller> {
    match &args.controller_path {
        Some(path) => {
            let file: ControllerFile = load_controller(path)?;
            if file.controller().n() != model.n() {
                return Err(anyhow!(
                    "controller is sized for {} nodes but the system has {}",
                    file.controller().n(),
                    model.n()
                ));
            }
            if let Some(edges) = file.edge_params() {
                let learnable = model
                    .edges
                    .iter()
                    .filter(|e| matches!(e, EdgeModel::Learnable { .. }))
                    .count();
                if edges.len() != learnable {
                    return Err(anyhow!(
                        "controller file carries {} edge functions, system has {}",
                        edges.len(),
                        learnable
                    ));
                }
                let mut it = edges.iter();
                for e in model.edges.iter_mut() {
                    if let EdgeModel::Learnable { params } = e {
                        *params = it.next().unwrap().clone();
                    }
                }
            }
            Ok(file.controller().clone())
        }
        None => args.config.build_controller(),
    }
}

/// One rollout of the first configured scenario; exports the trajectory and
/// a summary. Nonzero exit on integration blowup or range flags.
pub fn cmd_simulate(args: &CommonArgs) -> Result<i32> {
    ensure_out(&args.out_dir)?;
    let cfg = &args.config;
    let mut model = cfg.build_model()?;
    let ctrl = resolve_controller(args, &mut model)?;
    let scheme = args.scheme.unwrap_or(cfg.sim.scheme);
    let scenarios = gen_scenarios(&model, &cfg.build_scenario_spec(), 1, cfg.scenario.seed)?;
    let mut scen = scenarios.into_iter().next().unwrap();
    let local = model.with_load_delta(&scen.load_delta)?;
    if args.from_equilibrium {
        let cost = match &ctrl {
            Controller::NeuralPiComm { cost, .. } => cost.clone(),
            _ => cfg.build_cost()?,
        };
        match analytic_equilibrium(&local, &ctrl, &cost, local.y_bar) {
            Ok(eq) => {
                scen.x0 = eq.x_star;
                scen.eta0 = eq.eta_star;
                scen.s0 = eq.s_star;
            }
            Err(err) => {
                eprintln!("no feasible equilibrium to start from: {err}");
                return Ok(EXIT_NUMERICAL);
            }
        }
    }

    let traj = match rollout(
        &local,
        &ctrl,
        &scen.x0,
        &scen.eta0,
        &scen.s0,
        cfg.sim.k_steps,
        cfg.sim.dt,
        scheme,
    ) {
        Ok(t) => t,
        Err(err) => {
            eprintln!("simulation failed: {err}");
            return Ok(EXIT_NUMERICAL);
        }
    };
    let spec = cfg.build_loss();
    let cost = cfg.build_cost()?;
    let metrics = steady_metrics(
        &traj,
        local.y_bar,
        cfg.sim.eps_settle,
        Some(&cost),
        cfg.sim.t_ss_sample,
    );
    let summary = Summary::new(&traj, &metrics, Some(transient_loss(&traj, &spec)));
    write_trajectory_csv(&args.out_dir.join("trajectory.csv"), &traj, Some(&spec))?;
    save_json(&args.out_dir.join("summary.json"), &summary)?;
    if !traj.range_violations.is_empty() {
        eprintln!(
            "edge feedback left its operating range at {} steps (first at step {})",
            traj.range_violations.len(),
            traj.range_violations[0]
        );
        return Ok(EXIT_NUMERICAL);
    }
    println!(
        "simulate: {} steps, agreement error {:.3e}",
        traj.steps(),
        summary.agreement_error
    );
    Ok(EXIT_OK)
}

/// Trains per the config, streaming checkpoints to disk, and writes the loss
/// history and final controller.
pub fn cmd_train(args: &CommonArgs) -> Result<i32> {
    ensure_out(&args.out_dir)?;
    let cfg = &args.config;
    let mut model = cfg.build_model()?;
    let ctrl = match cfg.train.mode {
        // Edge learning trains the feedback shapes with no external control.
        crate::config::TrainMode::Edges => Controller::zero(model.n()),
        crate::config::TrainMode::Controller => resolve_controller(args, &mut model)?,
    };
    let spec = cfg.build_loss();
    let scen_spec = cfg.build_scenario_spec();
    let train_cfg = cfg.build_train_config();
    let out_dir = args.out_dir.clone();
    let result = train(&model, &ctrl, &spec, &scen_spec, &train_cfg, |cp| {
        let path = out_dir.join(format!("checkpoint_ep{:04}.json", cp.episode));
        let text = serde_json::to_string_pretty(cp)
            .map_err(|e| neuralpi_core::Error::InvalidParameter(e.to_string()))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| neuralpi_core::Error::InvalidParameter(e.to_string()))?;
        Ok(())
    });
    let report = match result {
        Ok(r) => r,
        Err(err) => {
            eprintln!("training aborted: {err} (checkpoints on disk are intact)");
            return Ok(EXIT_NUMERICAL);
        }
    };
    write_loss_history_csv(&args.out_dir.join("loss_history.csv"), &report.history)?;
    save_json(&args.out_dir.join("loss_history.json"), &report.history)?;
    let final_cp = report.checkpoints.last().expect("training emits a final checkpoint");
    save_json(&args.out_dir.join("controller.json"), final_cp)?;
    if let (Some(first), Some(last)) = (report.history.first(), report.history.last()) {
        println!(
            "train: {} episodes, mean loss {:.4} -> {:.4}",
            report.history.len(),
            first.mean_loss,
            last.mean_loss
        );
    } else {
        println!("train: 0 episodes, wrote the initial controller");
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    NotCovered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub worst: Option<f64>,
    pub threshold: Option<f64>,
    /// Worst-case step indices, when the check tracks them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub controller: String,
    pub scenarios: usize,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, pass: bool, worst: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
        worst: Some(worst),
        threshold: Some(threshold),
        steps: Vec::new(),
        detail,
    }
}

fn not_covered(name: &str, detail: &str) -> CheckResult {
    CheckResult {
        name: name.into(),
        status: CheckStatus::NotCovered,
        worst: None,
        threshold: None,
        steps: Vec::new(),
        detail: detail.into(),
    }
}

/// Runs the verification suite: per-scenario agreement, range flags, the
/// Lyapunov decrement monitor, equilibrium residuals, steady-state
/// optimality, and cross-term sampling. Structural guarantees only cover the
/// monotone and linear PI variants; for the dense baseline the stability
/// checks are reported informationally.
pub fn cmd_verify(args: &CommonArgs) -> Result<i32> {
    ensure_out(&args.out_dir)?;
    let cfg = &args.config;
    let mut model = cfg.build_model()?;
    let ctrl = resolve_controller(args, &mut model)?;
    let covered = !matches!(ctrl, Controller::Dense { .. });
    let comm_cost = match &ctrl {
        Controller::NeuralPiComm { cost, .. } => Some(cost.clone()),
        _ => None,
    };
    let scenarios = gen_scenarios(
        &model,
        &cfg.build_scenario_spec(),
        cfg.scenario.count,
        cfg.scenario.seed,
    )?;

    struct RunOutcome {
        agreement: f64,
        range_steps: Vec<usize>,
        lyap_violations: Vec<usize>,
        lyap_series: Option<neuralpi_core::analysis::LyapunovReport>,
        eq_residual: f64,
        spread: f64,
        w_gap: f64,
    }

    let runs: Vec<Result<RunOutcome>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(idx, scen): (usize, &Scenario)| -> Result<RunOutcome> {
            let local = model.with_load_delta(&scen.load_delta)?;
            let traj: Trajectory = rollout(
                &local,
                &ctrl,
                &scen.x0,
                &scen.eta0,
                &scen.s0,
                cfg.sim.k_steps,
                cfg.sim.dt,
                args.scheme.unwrap_or(cfg.sim.scheme),
            )?;
            let agreement = traj
                .final_outputs()
                .iter()
                .map(|&y| (y - local.y_bar).abs())
                .fold(0.0, f64::max);
            let mut outcome = RunOutcome {
                agreement,
                range_steps: traj.range_violations.clone(),
                lyap_violations: Vec::new(),
                lyap_series: None,
                eq_residual: 0.0,
                spread: 0.0,
                w_gap: 0.0,
            };
            if covered {
                let eq: Equilibrium = match &comm_cost {
                    Some(cost) => analytic_equilibrium(&local, &ctrl, cost, local.y_bar)?,
                    None => reference_equilibrium(&local, &ctrl)?,
                };
                let report = lyapunov_decrement(&traj, &local, &ctrl, &eq, 0.05)?;
                outcome.lyap_violations = report.violations.clone();
                if idx == 0 {
                    outcome.lyap_series = Some(report);
                }
                let state = SystemState {
                    x: eq.x_star.clone(),
                    eta: eq.eta_star.clone(),
                    s: eq.s_star.clone(),
                };
                outcome.eq_residual = closed_loop_deriv_inf_norm(&local, &ctrl, &state)?;
                if let Some(cost) = &comm_cost {
                    let w_end = &traj.controls[traj.steps()];
                    let res = kkt_residual(cost, w_end, &local, local.y_bar)?;
                    outcome.spread = res.spread;
                    outcome.w_gap = w_end
                        .iter()
                        .zip(&eq.w_star)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                }
            }
            Ok(outcome)
        })
        .collect();

    let mut outcomes = Vec::with_capacity(runs.len());
    for run in runs {
        match run {
            Ok(o) => outcomes.push(o),
            Err(err) => {
                eprintln!("verification rollout failed: {err}");
                return Ok(EXIT_NUMERICAL);
            }
        }
    }

    // The first scenario's decrement series doubles as plot-ready data.
    if let Some(report) = outcomes.first().and_then(|o| o.lyap_series.as_ref()) {
        crate::io::write_lyapunov_csv(&args.out_dir.join("lyapunov_series.csv"), report)?;
    }

    let mut checks = Vec::new();
    let range_steps: Vec<usize> = outcomes
        .iter()
        .flat_map(|o| o.range_steps.iter().copied())
        .collect();
    let mut range_check = check(
        "edge-operating-range",
        range_steps.is_empty(),
        range_steps.len() as f64,
        0.0,
        "steps with sine edges outside their monotone range".into(),
    );
    range_check.steps = range_steps;
    checks.push(range_check);
    let worst_agree = outcomes.iter().map(|o| o.agreement).fold(0.0, f64::max);
    if covered {
        checks.push(check(
            "output-agreement",
            worst_agree <= cfg.sim.eps_settle,
            worst_agree,
            cfg.sim.eps_settle,
            "worst final agreement error across scenarios".into(),
        ));
        let lyap_steps: Vec<usize> = outcomes
            .iter()
            .flat_map(|o| o.lyap_violations.iter().copied())
            .collect();
        let mut lyap_check = check(
            "lyapunov-decrement",
            lyap_steps.is_empty(),
            lyap_steps.len() as f64,
            0.0,
            "dissipation-bound violations across all scenarios".into(),
        );
        lyap_check.steps = lyap_steps;
        checks.push(lyap_check);
        let worst_eq = outcomes.iter().map(|o| o.eq_residual).fold(0.0, f64::max);
        checks.push(check(
            "equilibrium-residual",
            worst_eq <= 1e-9,
            worst_eq,
            1e-9,
            "closed-loop derivative at the analytic equilibrium".into(),
        ));
    } else {
        checks.push(not_covered(
            "output-agreement",
            &format!(
                "unstructured controller: no stability guarantee (worst error {worst_agree:.3e})"
            ),
        ));
        checks.push(not_covered(
            "lyapunov-decrement",
            "unstructured controller has no certified energy function",
        ));
        checks.push(not_covered(
            "equilibrium-residual",
            "equilibrium characterization needs a monotone integral function",
        ));
    }
    match &comm_cost {
        Some(_) => {
            let worst_spread = outcomes.iter().map(|o| o.spread).fold(0.0, f64::max);
            checks.push(check(
                "marginal-cost-consensus",
                worst_spread <= 1e-3,
                worst_spread,
                1e-3,
                "worst steady-state marginal-cost spread".into(),
            ));
            let worst_gap = outcomes.iter().map(|o| o.w_gap).fold(0.0, f64::max);
            checks.push(check(
                "setpoint-optimality",
                worst_gap <= 1e-3,
                worst_gap,
                1e-3,
                "worst gap between steady-state w and the optimal setpoints".into(),
            ));
            checks.push(cross_term_check(&ctrl));
        }
        None => {
            checks.push(not_covered(
                "marginal-cost-consensus",
                "requires the communicating controller variant",
            ));
        }
    }

    let passed = checks.iter().all(|c| c.status != CheckStatus::Fail);
    let report = VerifyReport {
        controller: match &ctrl {
            Controller::Linear { .. } => "linear".into(),
            Controller::Dense { .. } => "dense".into(),
            Controller::NeuralPi { .. } => "neural-pi".into(),
            Controller::NeuralPiComm { .. } => "neural-pi-comm".into(),
        },
        scenarios: scenarios.len(),
        passed,
        checks,
    };
    save_json(&args.out_dir.join("verify_report.json"), &report)?;
    for c in &report.checks {
        println!(
            "verify {}: {}",
            c.name,
            match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "FAIL",
                CheckStatus::NotCovered => "not covered",
            }
        );
    }
    Ok(if passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Samples the communication cross term over random integral states.
fn cross_term_check(ctrl: &Controller) -> CheckResult {
    use rand::{Rng, SeedableRng};
    let eval = ctrl.compile();
    let n = ctrl.n();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = vec![0.0; n];
        let ds = eval.s_deriv(&y, 0.0, &s);
        let inner: f64 = (0..n)
            .map(|i| eval.integral_fn(i).unwrap().eval(s[i]) * -ds[i])
            .sum();
        worst = worst.min(inner);
    }
    check(
        "cross-term-sign",
        worst >= -1e-12,
        worst,
        -1e-12,
        "smallest sampled cross-term inner product".into(),
    )
}

/// Equilibrium output for the equilibrium command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub equilibrium: Equilibrium,
    pub marginal_cost_spread: f64,
    pub balance_residual: f64,
}

pub fn cmd_equilibrium(args: &CommonArgs) -> Result<i32> {
    ensure_out(&args.out_dir)?;
    let cfg = &args.config;
    let mut model = cfg.build_model()?;
    let ctrl = resolve_controller(args, &mut model)?;
    let cost: CostFamily = match &ctrl {
        Controller::NeuralPiComm { cost, .. } => cost.clone(),
        _ => cfg.build_cost()?,
    };
    let eq = match analytic_equilibrium(&model, &ctrl, &cost, model.y_bar) {
        Ok(eq) => eq,
        Err(err) => {
            eprintln!("no feasible equilibrium: {err}");
            return Ok(EXIT_NUMERICAL);
        }
    };
    let res = kkt_residual(&cost, &eq.w_star, &model, model.y_bar)?;
    let report = EquilibriumReport {
        equilibrium: eq,
        marginal_cost_spread: res.spread,
        balance_residual: res.balance,
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    save_json(&args.out_dir.join("equilibrium.json"), &report)?;
    Ok(EXIT_OK)
}

pub struct ExportArgs {
    pub controller_path: PathBuf,
    pub out_dir: PathBuf,
    pub z_min: f64,
    pub z_max: f64,
    pub points: usize,
}

/// Dumps `(z, g(z))` tables for every monotone function in a controller or
/// checkpoint file.
pub fn cmd_export_monotone(args: &ExportArgs) -> Result<i32> {
    ensure_out(&args.out_dir)?;
    if args.z_min >= args.z_max || args.points == 0 {
        eprintln!("export range must satisfy z_min < z_max with at least one point");
        return Ok(EXIT_USAGE);
    }
    let file = load_controller(&args.controller_path)?;
    write_monotone_dump(
        &args.out_dir.join("monotone_functions.csv"),
        &file,
        args.z_min,
        args.z_max,
        args.points,
    )?;
    println!(
        "export-monotone: wrote {}",
        args.out_dir.join("monotone_functions.csv").display()
    );
    Ok(EXIT_OK)
}
