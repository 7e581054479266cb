//! Node and edge dynamics families, closed-loop assembly, and time stepping.
//!
//! The closed loop couples single-state node dynamics with integrating edge
//! dynamics through the incidence matrix: `zeta = E^T y` drives the edge
//! states, the edge outputs feed back as `u = -E psi(eta) + w`, and the
//! controller's integral state `s` rides along. Forward Euler is the training
//! integrator (its unrolled graph is what gets differentiated); classical RK4
//! exists for verification runs only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{Controller, ControllerEval};
use crate::error::Error;
use crate::float::{cos, sin};
use crate::graph::Graph;
use crate::monotone::{MonotoneParams, MonotoneWeights};
use crate::Result;

/// Half-open validity range for sinusoidal edge feedback.
pub const SINE_RANGE: f64 = core::f64::consts::FRAC_PI_2;

/// Node dynamics family. Both families have identity output maps and are
/// strictly equilibrium-independent passive with quadratic storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum NodeModel {
    /// `x' = kappa (-(x - v0) + v1 u)`; output is the velocity.
    Vehicle { kappa: f64, v0: f64, v1: f64 },
    /// `x' = -rho (x - x_bar) + p_m - load + u`; output is the frequency.
    Power {
        rho: f64,
        p_m: f64,
        load: f64,
        x_bar: f64,
    },
}

impl NodeModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NodeModel::Vehicle { kappa, v1, .. } => {
                if kappa <= 0.0 || v1 <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "vehicle node needs kappa > 0 and v1 > 0, got {kappa}, {v1}"
                    )));
                }
            }
            NodeModel::Power { rho, .. } => {
                if rho <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "power node needs rho > 0, got {rho}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `x' = f(x, u)`.
    pub fn deriv(&self, x: f64, u: f64) -> f64 {
        match *self {
            NodeModel::Vehicle { kappa, v0, v1 } => kappa * (-(x - v0) + v1 * u),
            NodeModel::Power {
                rho,
                p_m,
                load,
                x_bar,
            } => -rho * (x - x_bar) + p_m - load + u,
        }
    }

    /// `df/dx` (state coefficient; constant for both families).
    pub fn deriv_dx(&self) -> f64 {
        match *self {
            NodeModel::Vehicle { kappa, .. } => -kappa,
            NodeModel::Power { rho, .. } => -rho,
        }
    }

    /// `df/du` (input gain; constant for both families).
    pub fn deriv_du(&self) -> f64 {
        match *self {
            NodeModel::Vehicle { kappa, v1, .. } => kappa * v1,
            NodeModel::Power { .. } => 1.0,
        }
    }

    /// Quadratic storage function certifying strict EIP.
    pub fn storage(&self, x: f64, x_star: f64) -> f64 {
        let dx = x - x_star;
        match *self {
            NodeModel::Vehicle { kappa, v1, .. } => dx * dx / (2.0 * kappa * v1),
            NodeModel::Power { .. } => 0.5 * dx * dx,
        }
    }

    /// `dW/dx` at `(x, x_star)`.
    pub fn storage_grad(&self, x: f64, x_star: f64) -> f64 {
        let dx = x - x_star;
        match *self {
            NodeModel::Vehicle { kappa, v1, .. } => dx / (kappa * v1),
            NodeModel::Power { .. } => dx,
        }
    }

    /// Strict-EIP margin: `1/v1` for vehicles, the damping for generators.
    pub fn eip_rho(&self) -> f64 {
        match *self {
            NodeModel::Vehicle { v1, .. } => 1.0 / v1,
            NodeModel::Power { rho, .. } => rho,
        }
    }
}

/// Edge feedback family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EdgeModel {
    /// `mu = b sin(eta)`; physics-determined, monotone only on
    /// `(-pi/2, pi/2)`, which the simulator monitors but never clamps.
    Sine { b: f64 },
    /// Trainable monotone network feedback.
    Learnable { params: MonotoneParams },
}

impl EdgeModel {
    pub fn validate(&self) -> Result<()> {
        if let EdgeModel::Sine { b } = self {
            if *b <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "sine edge needs positive susceptance, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// `mu = psi(eta)`.
    pub fn output(&self, eta: f64) -> f64 {
        self.compile().output(eta)
    }

    /// `d psi / d eta`.
    pub fn output_grad(&self, eta: f64) -> f64 {
        self.compile().grad(eta)
    }

    pub(crate) fn compile(&self) -> EdgeEval {
        match self {
            EdgeModel::Sine { b } => EdgeEval::Sine { b: *b },
            EdgeModel::Learnable { params } => EdgeEval::Net(params.materialize()),
        }
    }
}

/// Materialized edge feedback, ready for per-step evaluation.
#[derive(Debug, Clone)]
pub enum EdgeEval {
    Sine { b: f64 },
    Net(MonotoneWeights),
}

impl EdgeEval {
    pub fn output(&self, eta: f64) -> f64 {
        match self {
            EdgeEval::Sine { b } => b * sin(eta),
            EdgeEval::Net(w) => w.forward(eta),
        }
    }

    pub fn grad(&self, eta: f64) -> f64 {
        match self {
            EdgeEval::Sine { b } => b * cos(eta),
            EdgeEval::Net(w) => w.grad_input(eta),
        }
    }

    /// Kink-averaged slope for Newton Jacobians.
    pub fn solver_slope(&self, eta: f64) -> f64 {
        match self {
            EdgeEval::Sine { b } => b * cos(eta),
            EdgeEval::Net(w) => w.slope_symmetric(eta),
        }
    }

    /// Exact antiderivative with value 0 at the origin (`b (1 - cos eta)`
    /// for the sine family; piecewise quadratic for networks).
    pub fn antiderivative(&self, eta: f64) -> f64 {
        match self {
            EdgeEval::Sine { b } => b * (1.0 - cos(eta)),
            EdgeEval::Net(w) => w.antiderivative(eta),
        }
    }

    /// False when a sine edge leaves its monotone operating range.
    pub fn in_range(&self, eta: f64) -> bool {
        match self {
            EdgeEval::Sine { .. } => eta.abs() < SINE_RANGE,
            EdgeEval::Net(_) => true,
        }
    }
}

/// Closed-loop plant: graph, homogeneous node family, edge feedback, and the
/// target agreement level. Immutable during simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub graph: Graph,
    pub nodes: Vec<NodeModel>,
    pub edges: Vec<EdgeModel>,
    pub y_bar: f64,
}

impl SystemModel {
    pub fn new(graph: Graph, nodes: Vec<NodeModel>, edges: Vec<EdgeModel>, y_bar: f64) -> Result<Self> {
        if nodes.len() != graph.n() {
            return Err(Error::DimensionMismatch {
                expected: graph.n(),
                got: nodes.len(),
            });
        }
        if edges.len() != graph.m() {
            return Err(Error::DimensionMismatch {
                expected: graph.m(),
                got: edges.len(),
            });
        }
        if !graph.is_connected() {
            return Err(Error::InvalidGraph("system graph must be connected".into()));
        }
        for node in &nodes {
            node.validate()?;
        }
        for edge in &edges {
            edge.validate()?;
        }
        Ok(SystemModel {
            graph,
            nodes,
            edges,
            y_bar,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn m(&self) -> usize {
        self.graph.m()
    }

    pub(crate) fn compile_edges(&self) -> Vec<EdgeEval> {
        self.edges.iter().map(|e| e.compile()).collect()
    }

    /// Trainable scalars across learnable edges.
    pub fn edge_param_count(&self) -> usize {
        self.edges
            .iter()
            .map(|e| match e {
                EdgeModel::Learnable { params } => params.flat_len(),
                EdgeModel::Sine { .. } => 0,
            })
            .sum()
    }

    pub fn edge_params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.edge_param_count());
        for e in &self.edges {
            if let EdgeModel::Learnable { params } = e {
                params.write_flat(&mut out);
            }
        }
        out
    }

    pub fn set_edge_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.edge_param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.edge_param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for e in &mut self.edges {
            if let EdgeModel::Learnable { params } = e {
                params.read_flat(&flat[offset..offset + params.flat_len()]);
                offset += params.flat_len();
            }
        }
        Ok(())
    }

    /// Learnable edge parameter bundles in edge order.
    pub fn learnable_edge_params(&self) -> Vec<MonotoneParams> {
        self.edges
            .iter()
            .filter_map(|e| match e {
                EdgeModel::Learnable { params } => Some(params.clone()),
                EdgeModel::Sine { .. } => None,
            })
            .collect()
    }

    /// Per-node loads (power family only); used by scenario perturbations.
    pub fn with_load_delta(&self, delta: &[f64]) -> Result<SystemModel> {
        if delta.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: delta.len(),
            });
        }
        let mut out = self.clone();
        for (node, &d) in out.nodes.iter_mut().zip(delta) {
            if let NodeModel::Power { load, .. } = node {
                *load += d;
            } else if d != 0.0 {
                return Err(Error::InvalidParameter(
                    "load perturbations only apply to power nodes".into(),
                ));
            }
        }
        Ok(out)
    }
}

/// Benchmark vehicle platoon: `kappa = 1`, preferred velocities in `[5, 6]`,
/// distance sensitivities in `[0.5, 1]`, learnable monotone edge feedback
/// with per-segment slopes inside `[0.5 * edge_scale, 1.5 * edge_scale]`.
pub fn vehicle_platoon(
    graph: Graph,
    y_bar: f64,
    seed: u64,
    edge_neurons: usize,
    edge_scale: f64,
) -> Result<SystemModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.n();
    let nodes = (0..n)
        .map(|_| NodeModel::Vehicle {
            kappa: 1.0,
            v0: rng.gen_range(5.0..6.0),
            v1: rng.gen_range(0.5..1.0),
        })
        .collect();
    let edges = (0..graph.m())
        .map(|l| EdgeModel::Learnable {
            params: MonotoneParams::init_banded(
                edge_neurons,
                seed ^ (0xedfe + l as u64),
                0.5 * edge_scale,
                1.5 * edge_scale,
            ),
        })
        .collect();
    SystemModel::new(graph, nodes, edges, y_bar)
}

/// Benchmark reduced generator network: damping in `[0.5, 1.5]`, fixed
/// generation in `[0.8, 1.2]` p.u., loads balanced against total generation,
/// sinusoidal edges with the given susceptance.
pub fn power_network(graph: Graph, x_bar: f64, seed: u64, susceptance: f64) -> Result<SystemModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.n();
    let p_m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.8..1.2)).collect();
    let spread: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let mean_spread: f64 = spread.iter().sum::<f64>() / n as f64;
    let nodes = (0..n)
        .map(|i| NodeModel::Power {
            rho: rng.gen_range(0.5..1.5),
            p_m: p_m[i],
            load: p_m[i] + spread[i] - mean_spread,
            x_bar,
        })
        .collect();
    let edges = (0..graph.m())
        .map(|_| EdgeModel::Sine { b: susceptance })
        .collect();
    SystemModel::new(graph, nodes, edges, x_bar)
}

/// Concatenated closed-loop state `(x, eta, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub x: Vec<f64>,
    pub eta: Vec<f64>,
    pub s: Vec<f64>,
}

impl SystemState {
    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite())
            && self.eta.iter().all(|v| v.is_finite())
            && self.s.iter().all(|v| v.is_finite())
    }
}

/// Integration scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Recorded rollout: states and per-step outputs, controls, inputs, and edge
/// flows at every grid point `k = 0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub y_bar: f64,
    pub states: Vec<SystemState>,
    /// Controller output `w` evaluated at each recorded state.
    pub controls: Vec<Vec<f64>>,
    /// Node input `u = -E mu + w` at each recorded state.
    pub inputs: Vec<Vec<f64>>,
    /// Edge outputs `mu = psi(eta)` at each recorded state.
    pub flows: Vec<Vec<f64>>,
    /// Step indices where a sine edge left its monotone range.
    pub range_violations: Vec<usize>,
}

impl Trajectory {
    /// Number of integration steps `K` (states run `0..=K`).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Outputs at step `k` (identity output map: `y = x`).
    pub fn outputs(&self, k: usize) -> &[f64] {
        &self.states[k].x
    }

    pub fn final_outputs(&self) -> &[f64] {
        self.outputs(self.steps())
    }
}

pub(crate) struct Derivs {
    pub dx: Vec<f64>,
    pub deta: Vec<f64>,
    pub ds: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub mu: Vec<f64>,
}

pub(crate) fn deriv_compiled(
    model: &SystemModel,
    edges: &[EdgeEval],
    ctrl: &ControllerEval,
    state: &SystemState,
) -> Derivs {
    let y = &state.x; // identity output map
    let mu: Vec<f64> = edges
        .iter()
        .zip(&state.eta)
        .map(|(e, &eta)| e.output(eta))
        .collect();
    let w = ctrl.output(y, model.y_bar, &state.s);
    let mut u = w.clone();
    let mut coupling = vec![0.0; model.n()];
    model.graph.accumulate_incidence(&mu, &mut coupling);
    for (ui, ci) in u.iter_mut().zip(&coupling) {
        *ui -= ci;
    }
    let dx: Vec<f64> = model
        .nodes
        .iter()
        .zip(y.iter().zip(&u))
        .map(|(node, (&xi, &ui))| node.deriv(xi, ui))
        .collect();
    let deta = model.graph.apply_transpose_raw(y);
    let ds = ctrl.s_deriv(y, model.y_bar, &state.s);
    Derivs {
        dx,
        deta,
        ds,
        w,
        u,
        mu,
    }
}

/// Closed-loop time derivative `(x', eta', s')` at a state.
pub fn closed_loop_deriv(
    model: &SystemModel,
    ctrl: &Controller,
    state: &SystemState,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_state_dims(model, ctrl, state)?;
    let edges = model.compile_edges();
    let eval = ctrl.compile();
    let d = deriv_compiled(model, &edges, &eval, state);
    Ok((d.dx, d.deta, d.ds))
}

fn check_state_dims(model: &SystemModel, ctrl: &Controller, state: &SystemState) -> Result<()> {
    if ctrl.n() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: ctrl.n(),
        });
    }
    for (len, expected) in [
        (state.x.len(), model.n()),
        (state.eta.len(), model.m()),
        (state.s.len(), model.n()),
    ] {
        if len != expected {
            return Err(Error::DimensionMismatch { expected, got: len });
        }
    }
    Ok(())
}

fn axpy_state(state: &SystemState, scale: f64, d: &Derivs) -> SystemState {
    SystemState {
        x: state
            .x
            .iter()
            .zip(&d.dx)
            .map(|(&v, &dv)| v + scale * dv)
            .collect(),
        eta: state
            .eta
            .iter()
            .zip(&d.deta)
            .map(|(&v, &dv)| v + scale * dv)
            .collect(),
        s: state
            .s
            .iter()
            .zip(&d.ds)
            .map(|(&v, &dv)| v + scale * dv)
            .collect(),
    }
}

pub(crate) fn step_compiled(
    model: &SystemModel,
    edges: &[EdgeEval],
    ctrl: &ControllerEval,
    state: &SystemState,
    dt: f64,
    scheme: Scheme,
) -> SystemState {
    match scheme {
        Scheme::Euler => {
            let d = deriv_compiled(model, edges, ctrl, state);
            axpy_state(state, dt, &d)
        }
        Scheme::Rk4 => {
            let k1 = deriv_compiled(model, edges, ctrl, state);
            let mid1 = axpy_state(state, 0.5 * dt, &k1);
            let k2 = deriv_compiled(model, edges, ctrl, &mid1);
            let mid2 = axpy_state(state, 0.5 * dt, &k2);
            let k3 = deriv_compiled(model, edges, ctrl, &mid2);
            let end = axpy_state(state, dt, &k3);
            let k4 = deriv_compiled(model, edges, ctrl, &end);
            let combine = |a: &[f64], b: &[f64], c: &[f64], d4: &[f64], base: &[f64]| {
                base.iter()
                    .enumerate()
                    .map(|(i, &v)| v + dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + d4[i]))
                    .collect::<Vec<f64>>()
            };
            SystemState {
                x: combine(&k1.dx, &k2.dx, &k3.dx, &k4.dx, &state.x),
                eta: combine(&k1.deta, &k2.deta, &k3.deta, &k4.deta, &state.eta),
                s: combine(&k1.ds, &k2.ds, &k3.ds, &k4.ds, &state.s),
            }
        }
    }
}

/// One forward-Euler step (the differentiable training path).
pub fn step_euler(
    model: &SystemModel,
    ctrl: &Controller,
    state: &SystemState,
    dt: f64,
) -> Result<SystemState> {
    step_checked(model, ctrl, state, dt, Scheme::Euler)
}

/// One classical RK4 step (verification path).
pub fn step_rk4(
    model: &SystemModel,
    ctrl: &Controller,
    state: &SystemState,
    dt: f64,
) -> Result<SystemState> {
    step_checked(model, ctrl, state, dt, Scheme::Rk4)
}

fn step_checked(
    model: &SystemModel,
    ctrl: &Controller,
    state: &SystemState,
    dt: f64,
    scheme: Scheme,
) -> Result<SystemState> {
    if dt <= 0.0 {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    check_state_dims(model, ctrl, state)?;
    let edges = model.compile_edges();
    let eval = ctrl.compile();
    let next = step_compiled(model, &edges, &eval, state, dt, scheme);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::IntegrationBlowup { step: 0 })
    }
}

/// Simulates `k_steps` steps from `(x0, eta0, s0)` and records everything.
///
/// Deterministic: identical inputs produce bitwise-identical trajectories.
/// Sine-edge range violations are flagged, never clamped; integration aborts
/// with the failing step index if the state leaves the finite range.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &SystemModel,
    ctrl: &Controller,
    x0: &[f64],
    eta0: &[f64],
    s0: &[f64],
    k_steps: usize,
    dt: f64,
    scheme: Scheme,
) -> Result<Trajectory> {
    if k_steps == 0 {
        return Err(Error::InvalidParameter("k_steps must be at least 1".into()));
    }
    if dt <= 0.0 {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let state = SystemState {
        x: x0.to_vec(),
        eta: eta0.to_vec(),
        s: s0.to_vec(),
    };
    check_state_dims(model, ctrl, &state)?;
    let edges = model.compile_edges();
    let eval = ctrl.compile();

    let mut traj = Trajectory {
        dt,
        y_bar: model.y_bar,
        states: Vec::with_capacity(k_steps + 1),
        controls: Vec::with_capacity(k_steps + 1),
        inputs: Vec::with_capacity(k_steps + 1),
        flows: Vec::with_capacity(k_steps + 1),
        range_violations: Vec::new(),
    };

    let mut current = state;
    for k in 0..=k_steps {
        let d = deriv_compiled(model, &edges, &eval, &current);
        if edges
            .iter()
            .zip(&current.eta)
            .any(|(e, &eta)| !e.in_range(eta))
        {
            traj.range_violations.push(k);
        }
        traj.controls.push(d.w.clone());
        traj.inputs.push(d.u.clone());
        traj.flows.push(d.mu.clone());
        traj.states.push(current.clone());
        if k == k_steps {
            break;
        }
        current = step_compiled(model, &edges, &eval, &current, dt, scheme);
        if !current.is_finite() {
            return Err(Error::IntegrationBlowup { step: k + 1 });
        }
    }
    Ok(traj)
}
