//! File formats: trajectory CSV, summary/report JSON, checkpoints, loss
//! history, and monotone-function dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use neuralpi_core::analysis::SteadyMetrics;
use neuralpi_core::control::Controller;
use neuralpi_core::dynamics::Trajectory;
use neuralpi_core::monotone::MonotoneParams;
use neuralpi_core::train::{Checkpoint, EpisodeStat, LossSpec};

/// Controller file: either a bare controller or a training checkpoint with
/// optional trained edge functions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControllerFile {
    Checkpoint(Checkpoint),
    Controller(Controller),
}

impl ControllerFile {
    pub fn controller(&self) -> &Controller {
        match self {
            ControllerFile::Checkpoint(cp) => &cp.controller,
            ControllerFile::Controller(c) => c,
        }
    }

    pub fn edge_params(&self) -> Option<&[MonotoneParams]> {
        match self {
            ControllerFile::Checkpoint(cp) if !cp.edge_params.is_empty() => {
                Some(&cp.edge_params)
            }
            _ => None,
        }
    }
}

pub fn load_controller(path: &Path) -> Result<ControllerFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read controller file {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("cannot parse controller file {}", path.display()))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Per-step loss terms for the CSV export: `(tracking, effort)` per node.
fn per_step_terms(traj: &Trajectory, spec: &LossSpec, k: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let y_bar = traj.y_bar;
    match spec {
        LossSpec::VehicleTracking { coeffs } => {
            let track = traj.outputs(k).iter().map(|&y| (y - y_bar).abs()).collect();
            let effort = traj.controls[k]
                .iter()
                .enumerate()
                .map(|(i, &w)| coeffs[i] * w * w)
                .collect();
            Some((track, effort))
        }
        LossSpec::PowerTracking { coeffs, abs_weight } => {
            let track = traj
                .outputs(k)
                .iter()
                .map(|&y| abs_weight * (y - y_bar).abs())
                .collect();
            let effort = traj.controls[k]
                .iter()
                .enumerate()
                .map(|(i, &w)| coeffs[i] * w * w * w * w)
                .collect();
            Some((track, effort))
        }
        LossSpec::EdgeOnly { .. } => None,
    }
}

/// Writes the trajectory table: time, states, outputs, controls, edge
/// states, integral states, and (when the loss family defines them)
/// per-node loss terms.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, spec: Option<&LossSpec>) -> Result<()> {
    let n = traj.outputs(0).len();
    let m = traj.states[0].eta.len();
    let mut out = String::new();
    out.push('t');
    for i in 1..=n {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",y_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",w_{i}"));
    }
    for l in 1..=m {
        out.push_str(&format!(",eta_{l}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",s_{i}"));
    }
    let with_loss = spec.map(|s| per_step_terms(traj, s, 0).is_some()) == Some(true);
    if with_loss {
        for i in 1..=n {
            out.push_str(&format!(",loss_track_{i}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",loss_ctrl_{i}"));
        }
    }
    out.push('\n');
    for k in 0..=traj.steps() {
        out.push_str(&format!("{}", traj.time(k)));
        let state = &traj.states[k];
        for &x in &state.x {
            out.push_str(&format!(",{x}"));
        }
        for &y in traj.outputs(k) {
            out.push_str(&format!(",{y}"));
        }
        for &w in &traj.controls[k] {
            out.push_str(&format!(",{w}"));
        }
        for &eta in &state.eta {
            out.push_str(&format!(",{eta}"));
        }
        for &s in &state.s {
            out.push_str(&format!(",{s}"));
        }
        if with_loss {
            let (track, effort) = per_step_terms(traj, spec.unwrap(), k).unwrap();
            for v in track.iter().chain(&effort) {
                out.push_str(&format!(",{v}"));
            }
        }
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Rollout summary emitted next to the trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub k_steps: usize,
    pub dt: f64,
    pub y_bar: f64,
    pub agreement_error: f64,
    pub settling_time: Option<f64>,
    pub steady_cost: Option<f64>,
    pub transient_loss: Option<f64>,
    pub range_violation_steps: Vec<usize>,
}

impl Summary {
    pub fn new(
        traj: &Trajectory,
        metrics: &SteadyMetrics,
        transient_loss: Option<f64>,
    ) -> Self {
        Summary {
            k_steps: traj.steps(),
            dt: traj.dt,
            y_bar: traj.y_bar,
            agreement_error: metrics.agreement_error,
            settling_time: metrics.settling_time,
            steady_cost: metrics.steady_cost,
            transient_loss,
            range_violation_steps: traj.range_violations.clone(),
        }
    }
}

/// Writes the decrement-monitor series `(t, V, dV/dt, bound)`.
pub fn write_lyapunov_csv(
    path: &Path,
    report: &neuralpi_core::analysis::LyapunovReport,
) -> Result<()> {
    let mut out = String::from("t,v,dv_dt,bound\n");
    for sample in &report.samples {
        out.push_str(&format!(
            "{},{},{},{}\n",
            sample.t, sample.v, sample.dv_dt, sample.bound
        ));
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn write_loss_history_csv(path: &Path, history: &[EpisodeStat]) -> Result<()> {
    let mut file = fs::File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writeln!(file, "episode,mean_loss,lr")?;
    for row in history {
        writeln!(file, "{},{},{}", row.episode, row.mean_loss, row.lr)?;
    }
    Ok(())
}

/// Dumps `(z, g(z))` tables for every monotone function in a controller file
/// as one CSV with a function label column.
pub fn write_monotone_dump(
    path: &Path,
    file: &ControllerFile,
    z_min: f64,
    z_max: f64,
    points: usize,
) -> Result<()> {
    let mut out = String::from("fn,z,g\n");
    let mut dump = |label: &str, params: &MonotoneParams| {
        let w = params.materialize();
        for k in 0..=points {
            let z = z_min + (z_max - z_min) * k as f64 / points as f64;
            out.push_str(&format!("{label},{z},{}\n", w.forward(z)));
        }
    };
    match file.controller() {
        Controller::NeuralPi { p_fns, r_fns } | Controller::NeuralPiComm { p_fns, r_fns, .. } => {
            for (i, f) in p_fns.iter().enumerate() {
                dump(&format!("p_{i}"), f);
            }
            for (i, f) in r_fns.iter().enumerate() {
                dump(&format!("r_{i}"), f);
            }
        }
        _ => {}
    }
    if let Some(edges) = file.edge_params() {
        for (l, f) in edges.iter().enumerate() {
            dump(&format!("psi_{l}"), f);
        }
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
