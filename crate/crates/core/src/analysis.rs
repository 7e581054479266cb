//! Equilibrium computation, Lyapunov monitoring, and steady-state metrics.
//!
//! The closed-form equilibrium pins the common marginal-cost level from the
//! network-balance constraint: summing `k_x^{-1}(ybar) = w* - E psi(eta*)`
//! over nodes kills the coupling term, so `gradCo^{-1}(gamma)` equals the net
//! equilibrium input divided by `sum_i chat_i^{-1}`, with the positive sign
//! that keeps `1^T w* = 1^T k_x^{-1}` (the sign is verified against a
//! brute-force KKT solve in the test suite). The Lyapunov function combines
//! per-node storage with Bregman distances of the edge feedback and integral
//! functions; along closed-loop trajectories its discrete decrement is
//! monitored against `-sum_i rho_i (y_i - y*)^2` up to an O(dt)
//! discretization allowance.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::control::{Controller, CostFamily, IntegralFn};
use crate::dynamics::{deriv_compiled, EdgeEval, NodeModel, SystemModel, SystemState, Trajectory};
use crate::error::Error;
use crate::graph::Graph;
use crate::linalg::solve_dense;
use crate::Result;

/// Inverse equilibrium input-state map at the agreement output.
///
/// Vehicle: `(ybar - v0) / v1`. Power: `rho (ybar - x_bar) + load - p_m`.
pub fn k_x_inverse(node: &NodeModel, y_bar: f64) -> f64 {
    match *node {
        NodeModel::Vehicle { v0, v1, .. } => (y_bar - v0) / v1,
        NodeModel::Power {
            rho,
            p_m,
            load,
            x_bar,
        } => rho * (y_bar - x_bar) + load - p_m,
    }
}

/// Closed-loop equilibrium under the communicating controller design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub x_star: Vec<f64>,
    pub w_star: Vec<f64>,
    pub s_star: Vec<f64>,
    pub eta_star: Vec<f64>,
    /// Common marginal-cost level.
    pub gamma: f64,
    /// Mean of the realized marginal costs `grad C_i(w_i*)`; agrees with
    /// `gamma` up to rounding and serves as a cross-check.
    pub marginal_cost: f64,
}

/// Solves `E psi(eta) = q` for `eta` in the range of `E^T` by damped Newton
/// in node potentials (`eta = E^T z`, `z_0 = 0`).
///
/// `q` must sum to zero (up to rounding); for sine edges the iterates are
/// kept strictly inside the monotone range and a solution outside it is
/// reported as infeasible.
pub fn edge_balance_angles(
    model: &SystemModel,
    injections: &[f64],
    init_z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let edges = model.compile_edges();
    solve_edge_balance(&model.graph, &edges, injections, init_z)
}

pub(crate) fn solve_edge_balance(
    graph: &Graph,
    edges: &[EdgeEval],
    q: &[f64],
    init_z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = graph.n();
    if q.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q.len(),
        });
    }
    let scale = q.iter().fold(1.0f64, |acc, &v| acc.max(v.abs()));
    let net: f64 = q.iter().sum();
    if net.abs() > 1e-9 * scale {
        return Err(Error::InfeasibleEquilibrium(format!(
            "injections sum to {net}, expected 0"
        )));
    }
    let mut z = vec![0.0; n];
    if let Some(init) = init_z {
        if init.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: init.len(),
            });
        }
        for i in 0..n {
            z[i] = init[i] - init[0];
        }
    }
    if n == 1 {
        return Ok(Vec::new());
    }
    let tol = 1e-12 * scale;
    let in_range = |eta: &[f64]| edges.iter().zip(eta).all(|(e, &v)| e.in_range(v));

    let residual = |z: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
        let eta = graph.apply_transpose_raw(z);
        let mu: Vec<f64> = edges.iter().zip(&eta).map(|(e, &v)| e.output(v)).collect();
        let mut f = q.iter().map(|&v| -v).collect::<Vec<f64>>();
        graph.accumulate_incidence(&mu, &mut f);
        let norm = f.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        (eta, f, norm)
    };

    let (mut eta, mut f, mut f_norm) = residual(&z);
    if init_z.is_some() && !in_range(&eta) {
        return Err(Error::InfeasibleEquilibrium(
            "initial angles outside the sine operating range".into(),
        ));
    }
    let m = n - 1;
    for _ in 0..200 {
        if f_norm <= tol {
            if !in_range(&eta) {
                return Err(Error::InfeasibleEquilibrium(
                    "balancing angles leave the sine operating range".into(),
                ));
            }
            return Ok(eta);
        }
        // Reduced Jacobian J = E diag(psi') E^T without row/column 0; slopes
        // are kink-averaged so piecewise-linear feedback stays solvable.
        let slopes: Vec<f64> = edges
            .iter()
            .zip(&eta)
            .map(|(e, &v)| e.solver_slope(v))
            .collect();
        let assemble = |ridge: f64| -> Vec<f64> {
            let mut jac = vec![0.0; m * m];
            for (l, &(h, t)) in graph.edges().iter().enumerate() {
                let s = slopes[l];
                if h > 0 {
                    jac[(h - 1) * m + (h - 1)] += s;
                }
                if t > 0 {
                    jac[(t - 1) * m + (t - 1)] += s;
                }
                if h > 0 && t > 0 {
                    jac[(h - 1) * m + (t - 1)] -= s;
                    jac[(t - 1) * m + (h - 1)] -= s;
                }
            }
            for i in 0..m {
                jac[i * m + i] += ridge;
            }
            jac
        };
        let mut rhs: Vec<f64> = f[1..].iter().map(|&v| -v).collect();
        let delta = match solve_dense(&mut assemble(0.0), &mut rhs, m) {
            Ok(d) => d,
            Err(_) => {
                // Flat segments can make the reduced Laplacian singular; a
                // small ridge recovers a descent direction and the line
                // search keeps the iteration honest.
                let mut rhs: Vec<f64> = f[1..].iter().map(|&v| -v).collect();
                solve_dense(&mut assemble(1e-8), &mut rhs, m).map_err(|_| {
                    Error::InfeasibleEquilibrium("singular edge-balance Jacobian".into())
                })?
            }
        };

        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = (0..n)
                .map(|i| if i == 0 { 0.0 } else { z[i] + step * delta[i - 1] })
                .collect();
            let (eta_t, f_t, norm_t) = residual(&trial);
            if in_range(&eta_t) && norm_t < f_norm {
                z = trial;
                eta = eta_t;
                f = f_t;
                f_norm = norm_t;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return Err(Error::InfeasibleEquilibrium(format!(
                    "edge-balance iteration stalled at residual {f_norm}"
                )));
            }
        }
    }
    Err(Error::InfeasibleEquilibrium(format!(
        "edge-balance iteration did not converge (residual {f_norm})"
    )))
}

/// Pre-disturbance operating angles: solves the network flow that carries the
/// fixed generation/load imbalance with zero external control.
pub fn power_flow_angles(model: &SystemModel) -> Result<Vec<f64>> {
    let q: Vec<f64> = model
        .nodes
        .iter()
        .map(|node| match *node {
            NodeModel::Power { p_m, load, .. } => Ok(p_m - load),
            NodeModel::Vehicle { .. } => Err(Error::InvalidParameter(
                "power flow requires power nodes".into(),
            )),
        })
        .collect::<Result<_>>()?;
    edge_balance_angles(model, &q, None)
}

/// Inverts a strictly increasing scalar function by bracketing bisection.
fn invert_monotone(f: &IntegralFn<'_>, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut grow = 0;
    while f.eval(lo) > target {
        lo *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::InfeasibleEquilibrium(format!(
                "integral function cannot reach {target} from below"
            )));
        }
    }
    while f.eval(hi) < target {
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(Error::InfeasibleEquilibrium(format!(
                "integral function cannot reach {target} from above"
            )));
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            return Ok(mid);
        }
        if f.eval(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Closed-form equilibrium for the communicating design (and for any
/// controller with strictly increasing integral functions).
///
/// The marginal-cost level satisfies
/// `gradCo^{-1}(gamma) = (1^T k_x^{-1}) / (sum_i chat_i^{-1})`; the setpoints
/// are `w* = gradCo^{-1}(gamma) * chat^{-1}`, the integral states invert
/// `r_i(s_i*) = w_i*`, and the edge states balance `E psi(eta*) = w* -
/// k_x^{-1}` on the range of `E^T`.
pub fn analytic_equilibrium(
    model: &SystemModel,
    ctrl: &Controller,
    cost: &CostFamily,
    y_bar: f64,
) -> Result<Equilibrium> {
    let n = model.n();
    if cost.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cost.len(),
        });
    }
    if ctrl.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: ctrl.n(),
        });
    }
    let kxinv: Vec<f64> = model
        .nodes
        .iter()
        .map(|node| k_x_inverse(node, y_bar))
        .collect();
    let c_hat = cost.scaling_factors();
    let c_bar: f64 = c_hat.iter().map(|&c| 1.0 / c).sum();
    let gco_inv_gamma: f64 = kxinv.iter().sum::<f64>() / c_bar;
    let gamma = cost.grad_co(gco_inv_gamma);
    let w_star: Vec<f64> = c_hat.iter().map(|&c| gco_inv_gamma / c).collect();
    let marginal_cost = w_star
        .iter()
        .enumerate()
        .map(|(i, &w)| cost.marginal(i, w))
        .sum::<f64>()
        / n as f64;

    let eval = ctrl.compile();
    let mut s_star = vec![0.0; n];
    for i in 0..n {
        let r_i = eval.integral_fn(i)?;
        s_star[i] = invert_monotone(&r_i, w_star[i])?;
    }

    let q: Vec<f64> = w_star.iter().zip(&kxinv).map(|(&w, &k)| w - k).collect();
    let eta_star = edge_balance_angles(model, &q, None)?;

    Ok(Equilibrium {
        x_star: vec![y_bar; n],
        w_star,
        s_star,
        eta_star,
        gamma,
        marginal_cost,
    })
}

/// Infinity norm of the closed-loop derivative at a state; the equilibrium
/// residual when evaluated at a computed equilibrium.
pub fn closed_loop_deriv_inf_norm(
    model: &SystemModel,
    ctrl: &Controller,
    state: &SystemState,
) -> Result<f64> {
    let (dx, deta, ds) = crate::dynamics::closed_loop_deriv(model, ctrl, state)?;
    Ok(dx
        .iter()
        .chain(&deta)
        .chain(&ds)
        .fold(0.0f64, |a, &b| a.max(b.abs())))
}

/// Equilibrium pinned by uniform quadratic costs; a canonical member of the
/// plain design's equilibrium set, used as the Lyapunov reference when no
/// cost family is configured.
pub fn reference_equilibrium(model: &SystemModel, ctrl: &Controller) -> Result<Equilibrium> {
    analytic_equilibrium(
        model,
        ctrl,
        &CostFamily::uniform_quadratic(model.n()),
        model.y_bar,
    )
}

/// Strictly increasing scalar function with a closed-form antiderivative.
pub trait MonotoneScalar {
    fn eval(&self, z: f64) -> f64;
    fn antiderivative(&self, z: f64) -> f64;
}

impl MonotoneScalar for crate::monotone::MonotoneWeights {
    fn eval(&self, z: f64) -> f64 {
        self.forward(z)
    }
    fn antiderivative(&self, z: f64) -> f64 {
        self.antiderivative(z)
    }
}

impl MonotoneScalar for EdgeEval {
    fn eval(&self, z: f64) -> f64 {
        self.output(z)
    }
    fn antiderivative(&self, z: f64) -> f64 {
        self.antiderivative(z)
    }
}

impl MonotoneScalar for IntegralFn<'_> {
    fn eval(&self, z: f64) -> f64 {
        IntegralFn::eval(self, z)
    }
    fn antiderivative(&self, z: f64) -> f64 {
        IntegralFn::antiderivative(self, z)
    }
}

/// Bregman distance `B(v, v*) = F(v) - F(v*) - f(v*)(v - v*)` of the convex
/// antiderivative `F`; nonnegative, zero iff `v = v*` for strictly
/// increasing `f`.
pub fn bregman<F: MonotoneScalar + ?Sized>(f: &F, v: f64, v_star: f64) -> f64 {
    f.antiderivative(v) - f.antiderivative(v_star) - f.eval(v_star) * (v - v_star)
}

fn lyapunov_compiled(
    model: &SystemModel,
    edges: &[EdgeEval],
    eval: &crate::control::ControllerEval,
    state: &SystemState,
    eq: &Equilibrium,
) -> Result<f64> {
    let mut v = 0.0;
    for (i, node) in model.nodes.iter().enumerate() {
        v += node.storage(state.x[i], eq.x_star[i]);
    }
    for (l, edge) in edges.iter().enumerate() {
        v += bregman(edge, state.eta[l], eq.eta_star[l]);
    }
    for i in 0..model.n() {
        let r_i = eval.integral_fn(i)?;
        v += bregman(&r_i, state.s[i], eq.s_star[i]);
    }
    Ok(v)
}

/// Lyapunov function value: per-node storage plus edge and integral Bregman
/// distances. Zero at the equilibrium, positive elsewhere.
pub fn lyapunov_value(
    model: &SystemModel,
    ctrl: &Controller,
    state: &SystemState,
    eq: &Equilibrium,
) -> Result<f64> {
    let edges = model.compile_edges();
    let eval = ctrl.compile();
    lyapunov_compiled(model, &edges, &eval, state, eq)
}

/// One monitored interval of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSample {
    pub t: f64,
    pub v: f64,
    /// Discrete decrement `(V_{k+1} - V_k) / dt`.
    pub dv_dt: f64,
    /// Dissipation bound `-sum_i rho_i (y_i - y*)^2` at the left state.
    pub bound: f64,
    /// Exact continuous decrement `dV/dt` at the left state.
    pub v_dot: f64,
}

/// Decrement monitor output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub samples: Vec<LyapunovSample>,
    pub v_final: f64,
    /// Discretization allowance added to the bound.
    pub tol: f64,
    /// Step indices where `dv_dt > bound + tol`.
    pub violations: Vec<usize>,
    /// Worst signed excess of `dv_dt` over the bound.
    pub worst_bound_residual: f64,
    /// Worst `|dv_dt - v_dot|`; shrinks linearly with dt.
    pub worst_discretization_residual: f64,
}

/// Monitors the discrete Lyapunov decrement along a trajectory against the
/// dissipation bound, with allowance `tol = tol_coeff * dt * max(V(0), 1)`.
///
/// The monitor is meaningful for controllers covered by the stability
/// guarantee (monotone or linear PI with positive gains); it reports, never
/// fails, so callers can run it informationally on other variants with a
/// reference equilibrium of their choice.
pub fn lyapunov_decrement(
    traj: &Trajectory,
    model: &SystemModel,
    ctrl: &Controller,
    eq: &Equilibrium,
    tol_coeff: f64,
) -> Result<LyapunovReport> {
    let edges = model.compile_edges();
    let eval = ctrl.compile();
    let k_steps = traj.steps();
    let mut values = Vec::with_capacity(k_steps + 1);
    for state in &traj.states {
        values.push(lyapunov_compiled(model, &edges, &eval, state, eq)?);
    }
    let tol = tol_coeff * traj.dt * values[0].max(1.0);
    let mut samples = Vec::with_capacity(k_steps);
    let mut violations = Vec::new();
    let mut worst_bound = f64::NEG_INFINITY;
    let mut worst_disc = 0.0f64;
    for k in 0..k_steps {
        let state = &traj.states[k];
        let dv_dt = (values[k + 1] - values[k]) / traj.dt;
        let bound: f64 = model
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let e = state.x[i] - eq.x_star[i];
                -node.eip_rho() * e * e
            })
            .sum();
        // Exact continuous decrement at the left state.
        let d = deriv_compiled(model, &edges, &eval, state);
        let mut v_dot = 0.0;
        for (i, node) in model.nodes.iter().enumerate() {
            v_dot += node.storage_grad(state.x[i], eq.x_star[i]) * d.dx[i];
        }
        for (l, edge) in edges.iter().enumerate() {
            v_dot += (edge.output(state.eta[l]) - edge.output(eq.eta_star[l])) * d.deta[l];
        }
        for i in 0..model.n() {
            let r_i = eval.integral_fn(i)?;
            v_dot += (r_i.eval(state.s[i]) - r_i.eval(eq.s_star[i])) * d.ds[i];
        }

        let residual = dv_dt - bound;
        worst_bound = worst_bound.max(residual);
        worst_disc = worst_disc.max((dv_dt - v_dot).abs());
        if residual > tol {
            violations.push(k);
        }
        samples.push(LyapunovSample {
            t: traj.time(k),
            v: values[k],
            dv_dt,
            bound,
            v_dot,
        });
    }
    Ok(LyapunovReport {
        samples,
        v_final: values[k_steps],
        tol,
        violations,
        worst_bound_residual: worst_bound,
        worst_discretization_residual: worst_disc,
    })
}

/// Optimality residuals of a setpoint vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// `max_i gradC_i(w_i) - min_i gradC_i(w_i)`.
    pub spread: f64,
    /// `|1^T w - 1^T k_x^{-1}(ybar)|`.
    pub balance: f64,
}

/// Marginal-cost spread and network-balance residual of `w`.
pub fn kkt_residual(
    cost: &CostFamily,
    w: &[f64],
    model: &SystemModel,
    y_bar: f64,
) -> Result<KktResidual> {
    if w.len() != model.n() || cost.len() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: w.len().min(cost.len()),
        });
    }
    let marginals = cost.marginal_vec(w);
    let max = marginals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = marginals.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let net_kxinv: f64 = model
        .nodes
        .iter()
        .map(|node| k_x_inverse(node, y_bar))
        .sum();
    let total: f64 = w.iter().sum();
    Ok(KktResidual {
        spread: max - min,
        balance: (total - net_kxinv).abs(),
    })
}

/// Steady-state summary of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyMetrics {
    /// `max_i |y_i(T) - ybar|` at the final state.
    pub agreement_error: f64,
    /// First time after which all outputs stay within `eps`; `None` if the
    /// trajectory never settles.
    pub settling_time: Option<f64>,
    /// `sum_i C_i(w_i)` sampled at the configured steady-state time.
    pub steady_cost: Option<f64>,
}

/// Agreement error, settling time, and sampled steady-state cost.
pub fn steady_metrics(
    traj: &Trajectory,
    y_bar: f64,
    eps: f64,
    cost: Option<&CostFamily>,
    t_sample: f64,
) -> SteadyMetrics {
    let k_steps = traj.steps();
    let worst = |k: usize| -> f64 {
        traj.outputs(k)
            .iter()
            .map(|&y| (y - y_bar).abs())
            .fold(0.0, f64::max)
    };
    let agreement_error = worst(k_steps);
    let mut first_settled = None;
    for k in (0..=k_steps).rev() {
        if worst(k) <= eps {
            first_settled = Some(k);
        } else {
            break;
        }
    }
    let settling_time = first_settled.map(|k| traj.time(k));
    let steady_cost = cost.map(|c| {
        let k = ((t_sample / traj.dt) as usize).min(k_steps);
        c.total_cost(&traj.controls[k])
    });
    SteadyMetrics {
        agreement_error,
        settling_time,
        steady_cost,
    }
}
