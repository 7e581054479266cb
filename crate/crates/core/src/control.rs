//! Controller variants and steady-state cost families.
//!
//! All controllers produce a per-node external input
//! `w_i = p_i(ybar - y_i) + r_i(s_i)` (or an unstructured feed-forward on the
//! same information for the dense baseline). The integral state follows
//! either the plain law `s' = -(y - ybar)` or, for the communicating variant,
//! adds a marginal-cost consensus term over a communication graph that steers
//! the steady state to the optimal resource allocation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::float::{ipow, odd_root, pow, tanh};
use crate::graph::Graph;
use crate::monotone::{MonotoneParams, MonotoneWeights};
use crate::Result;

/// Setpoint cost family `C_i(w) = (c_i / p) * w^p` with even exponent `p`.
///
/// The marginal cost is `grad C_i(w) = c_i * w^(p-1)`, strictly increasing,
/// and factors through the common prototype `C_o(z) = z^p / p` as
/// `grad C_i(w) = grad C_o(chat_i * w)` with scaling factors
/// `chat_i = c_i^(1/(p-1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCost", into = "RawCost")]
pub struct CostFamily {
    exponent: u32,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawCost {
    exponent: u32,
    coeffs: Vec<f64>,
}

impl TryFrom<RawCost> for CostFamily {
    type Error = Error;
    fn try_from(raw: RawCost) -> Result<Self> {
        CostFamily::new(raw.exponent, raw.coeffs)
    }
}

impl From<CostFamily> for RawCost {
    fn from(c: CostFamily) -> Self {
        RawCost {
            exponent: c.exponent,
            coeffs: c.coeffs,
        }
    }
}

impl CostFamily {
    /// Requires an even exponent `p >= 2` and positive coefficients.
    pub fn new(exponent: u32, coeffs: Vec<f64>) -> Result<Self> {
        if exponent < 2 || exponent % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "cost exponent must be even and >= 2, got {exponent}"
            )));
        }
        if coeffs.is_empty() || coeffs.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidParameter(
                "cost coefficients must be positive".into(),
            ));
        }
        Ok(CostFamily { exponent, coeffs })
    }

    /// Uniform quadratic costs, `C_i(w) = w^2 / 2`.
    pub fn uniform_quadratic(n: usize) -> Self {
        CostFamily {
            exponent: 2,
            coeffs: vec![1.0; n],
        }
    }

    /// Coefficients drawn uniformly from `[lo, hi]`, deterministic under seed.
    pub fn random(exponent: u32, n: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        CostFamily::new(exponent, coeffs)
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `C_i(w) = (c_i / p) * w^p`.
    pub fn cost(&self, i: usize, w: f64) -> f64 {
        self.coeffs[i] / self.exponent as f64 * ipow(w, self.exponent)
    }

    /// `sum_i C_i(w_i)`.
    pub fn total_cost(&self, w: &[f64]) -> f64 {
        w.iter().enumerate().map(|(i, &wi)| self.cost(i, wi)).sum()
    }

    /// Marginal cost `grad C_i(w) = c_i * w^(p-1)`.
    pub fn marginal(&self, i: usize, w: f64) -> f64 {
        self.coeffs[i] * ipow(w, self.exponent - 1)
    }

    /// Component-wise marginal costs.
    pub fn marginal_vec(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .enumerate()
            .map(|(i, &wi)| self.marginal(i, wi))
            .collect()
    }

    /// Second derivative `c_i * (p-1) * w^(p-2)`.
    pub fn curvature(&self, i: usize, w: f64) -> f64 {
        self.coeffs[i] * (self.exponent - 1) as f64 * ipow(w, self.exponent - 2)
    }

    /// Inverse marginal `grad C_i^{-1}(lambda)`.
    pub fn marginal_inverse(&self, i: usize, lambda: f64) -> f64 {
        odd_root(lambda / self.coeffs[i], self.exponent - 1)
    }

    /// `grad C_o^{-1}(gamma) = sign(gamma) * |gamma|^(1/(p-1))` for the
    /// prototype `C_o(z) = z^p / p`.
    pub fn grad_co_inv(&self, gamma: f64) -> f64 {
        odd_root(gamma, self.exponent - 1)
    }

    /// Prototype gradient `grad C_o(z) = z^(p-1)`.
    pub fn grad_co(&self, z: f64) -> f64 {
        ipow(z, self.exponent - 1)
    }

    /// Scaling factors `chat_i = c_i^(1/(p-1))` satisfying
    /// `grad C_i(w) = grad C_o(chat_i * w)` identically.
    pub fn scaling_factors(&self) -> Vec<f64> {
        let k = self.exponent - 1;
        self.coeffs
            .iter()
            .map(|&c| if k == 1 { c } else { pow(c, 1.0 / k as f64) })
            .collect()
    }
}

/// Odd coupling function for the communication edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phi {
    Identity,
    Tanh,
}

impl Phi {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Phi::Identity => z,
            Phi::Tanh => tanh(z),
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        match self {
            Phi::Identity => 1.0,
            Phi::Tanh => {
                let t = tanh(z);
                1.0 - t * t
            }
        }
    }
}

/// Two-layer ReLU network applied per node to `(ybar - y_i, s_i)`; the
/// unstructured baseline. Weights are shared across nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub hidden: usize,
    /// First layer, row-major `hidden x 2`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Output layer, length `hidden`.
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl DenseNet {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lim1 = 1.0 / crate::float::sqrt(2.0);
        let lim2 = 1.0 / crate::float::sqrt(hidden as f64);
        DenseNet {
            hidden,
            w1: (0..2 * hidden).map(|_| rng.gen_range(-lim1..lim1)).collect(),
            b1: (0..hidden).map(|_| rng.gen_range(-lim1..lim1)).collect(),
            w2: (0..hidden).map(|_| rng.gen_range(-lim2..lim2)).collect(),
            b2: 0.0,
        }
    }

    pub fn forward(&self, e: f64, s: f64) -> f64 {
        let mut out = self.b2;
        for k in 0..self.hidden {
            let pre = self.w1[2 * k] * e + self.w1[2 * k + 1] * s + self.b1[k];
            if pre > 0.0 {
                out += self.w2[k] * pre;
            }
        }
        out
    }

    /// `(d out / d e, d out / d s)`.
    pub fn input_grads(&self, e: f64, s: f64) -> (f64, f64) {
        let mut de = 0.0;
        let mut ds = 0.0;
        for k in 0..self.hidden {
            let pre = self.w1[2 * k] * e + self.w1[2 * k + 1] * s + self.b1[k];
            if pre > 0.0 {
                de += self.w2[k] * self.w1[2 * k];
                ds += self.w2[k] * self.w1[2 * k + 1];
            }
        }
        (de, ds)
    }

    pub fn flat_len(&self) -> usize {
        4 * self.hidden + 1
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
    }

    pub fn read_flat(&mut self, flat: &[f64]) {
        let h = self.hidden;
        self.w1.copy_from_slice(&flat[..2 * h]);
        self.b1.copy_from_slice(&flat[2 * h..3 * h]);
        self.w2.copy_from_slice(&flat[3 * h..4 * h]);
        self.b2 = flat[4 * h];
    }

    /// Accumulates parameter gradients for `upstream * forward(e, s)`.
    pub(crate) fn grad_into(&self, e: f64, s: f64, upstream: f64, out: &mut [f64]) {
        if upstream == 0.0 {
            return;
        }
        let h = self.hidden;
        for k in 0..h {
            let pre = self.w1[2 * k] * e + self.w1[2 * k + 1] * s + self.b1[k];
            if pre > 0.0 {
                out[3 * h + k] += upstream * pre; // w2
                let gh = upstream * self.w2[k];
                out[2 * k] += gh * e; // w1[:, 0]
                out[2 * k + 1] += gh * s; // w1[:, 1]
                out[2 * h + k] += gh; // b1
            }
        }
        out[4 * h] += upstream; // b2
    }
}

/// Controller parameter bundle; immutable during a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum Controller {
    /// `w_i = kp_i (ybar - y_i) + ki_i s_i`.
    Linear { kp: Vec<f64>, ki: Vec<f64> },
    /// Unstructured per-node feed-forward baseline.
    Dense { net: DenseNet, n: usize },
    /// Monotone `p_i`, `r_i` per node; integral law `s' = -(y - ybar)`.
    NeuralPi {
        p_fns: Vec<MonotoneParams>,
        r_fns: Vec<MonotoneParams>,
    },
    /// Monotone PI plus marginal-cost consensus over a communication graph.
    NeuralPiComm {
        p_fns: Vec<MonotoneParams>,
        r_fns: Vec<MonotoneParams>,
        comm: Graph,
        cost: CostFamily,
        phi: Phi,
    },
}

impl Controller {
    /// Unit-gain linear PI on `n` nodes.
    pub fn linear_unit(n: usize) -> Self {
        Controller::Linear {
            kp: vec![1.0; n],
            ki: vec![1.0; n],
        }
    }

    /// Zero controller (`w = 0` identically); used by edge-learning runs.
    pub fn zero(n: usize) -> Self {
        Controller::Linear {
            kp: vec![0.0; n],
            ki: vec![0.0; n],
        }
    }

    /// Randomly initialized monotone PI controller.
    pub fn neural_pi(n: usize, d: usize, seed: u64, scale: f64) -> Self {
        Controller::NeuralPi {
            p_fns: (0..n)
                .map(|i| MonotoneParams::init(d, seed ^ (0x9e37 + 2 * i as u64), scale))
                .collect(),
            r_fns: (0..n)
                .map(|i| MonotoneParams::init(d, seed ^ (0x7f4a + 2 * i as u64 + 1), scale))
                .collect(),
        }
    }

    /// Randomly initialized communicating monotone PI controller.
    pub fn neural_pi_comm(
        n: usize,
        d: usize,
        seed: u64,
        scale: f64,
        comm: Graph,
        cost: CostFamily,
        phi: Phi,
    ) -> Result<Self> {
        if comm.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: comm.n(),
            });
        }
        if cost.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: cost.len(),
            });
        }
        let base = Controller::neural_pi(n, d, seed, scale);
        let (p_fns, r_fns) = match base {
            Controller::NeuralPi { p_fns, r_fns } => (p_fns, r_fns),
            _ => unreachable!(),
        };
        Ok(Controller::NeuralPiComm {
            p_fns,
            r_fns,
            comm,
            cost,
            phi,
        })
    }

    pub fn n(&self) -> usize {
        match self {
            Controller::Linear { kp, .. } => kp.len(),
            Controller::Dense { n, .. } => *n,
            Controller::NeuralPi { p_fns, .. } => p_fns.len(),
            Controller::NeuralPiComm { p_fns, .. } => p_fns.len(),
        }
    }

    /// Materializes monotone weights once so rollouts avoid per-step
    /// reparameterization work.
    pub fn compile(&self) -> ControllerEval {
        let kind = match self {
            Controller::Linear { kp, ki } => EvalKind::Linear {
                kp: kp.clone(),
                ki: ki.clone(),
            },
            Controller::Dense { net, n } => EvalKind::Dense {
                net: net.clone(),
                n: *n,
            },
            Controller::NeuralPi { p_fns, r_fns } => EvalKind::Monotone {
                p_w: p_fns.iter().map(|p| p.materialize()).collect(),
                r_w: r_fns.iter().map(|r| r.materialize()).collect(),
                comm: None,
            },
            Controller::NeuralPiComm {
                p_fns,
                r_fns,
                comm,
                cost,
                phi,
            } => EvalKind::Monotone {
                p_w: p_fns.iter().map(|p| p.materialize()).collect(),
                r_w: r_fns.iter().map(|r| r.materialize()).collect(),
                comm: Some(CommEval {
                    graph: comm.clone(),
                    cost: cost.clone(),
                    phi: *phi,
                    c_hat: cost.scaling_factors(),
                }),
            },
        };
        ControllerEval { kind }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            Controller::Linear { kp, ki } => kp.len() + ki.len(),
            Controller::Dense { net, .. } => net.flat_len(),
            Controller::NeuralPi { p_fns, r_fns }
            | Controller::NeuralPiComm { p_fns, r_fns, .. } => p_fns
                .iter()
                .chain(r_fns.iter())
                .map(|f| f.flat_len())
                .sum(),
        }
    }

    /// Flattens trainable parameters (per node: `p_i` then `r_i` for the
    /// monotone variants).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match self {
            Controller::Linear { kp, ki } => {
                out.extend_from_slice(kp);
                out.extend_from_slice(ki);
            }
            Controller::Dense { net, .. } => net.write_flat(&mut out),
            Controller::NeuralPi { p_fns, r_fns }
            | Controller::NeuralPiComm { p_fns, r_fns, .. } => {
                for (p, r) in p_fns.iter().zip(r_fns.iter()) {
                    p.write_flat(&mut out);
                    r.write_flat(&mut out);
                }
            }
        }
        out
    }

    /// Writes flattened parameters back; shapes must match `params_flat`.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        match self {
            Controller::Linear { kp, ki } => {
                let n = kp.len();
                kp.copy_from_slice(&flat[..n]);
                ki.copy_from_slice(&flat[n..]);
            }
            Controller::Dense { net, .. } => net.read_flat(flat),
            Controller::NeuralPi { p_fns, r_fns }
            | Controller::NeuralPiComm { p_fns, r_fns, .. } => {
                let mut offset = 0;
                for (p, r) in p_fns.iter_mut().zip(r_fns.iter_mut()) {
                    p.read_flat(&flat[offset..offset + p.flat_len()]);
                    offset += p.flat_len();
                    r.read_flat(&flat[offset..offset + r.flat_len()]);
                    offset += r.flat_len();
                }
            }
        }
        Ok(())
    }

    /// `w = p(ybar - y) + r(s)` (variant-specific form).
    pub fn control_output(&self, y: &[f64], y_bar: f64, s: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(y, s)?;
        Ok(self.compile().output(y, y_bar, s))
    }

    /// Integral-state derivative: `-(y - ybar)` plus, for the communicating
    /// variant, the marginal-cost consensus term.
    pub fn integral_deriv(&self, y: &[f64], y_bar: f64, s: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(y, s)?;
        Ok(self.compile().s_deriv(y, y_bar, s))
    }

    fn check_dims(&self, y: &[f64], s: &[f64]) -> Result<()> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: y.len(),
            });
        }
        if s.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: s.len(),
            });
        }
        Ok(())
    }
}

/// Materialized, evaluation-ready controller view.
pub struct ControllerEval {
    pub(crate) kind: EvalKind,
}

pub(crate) enum EvalKind {
    Linear {
        kp: Vec<f64>,
        ki: Vec<f64>,
    },
    Dense {
        net: DenseNet,
        n: usize,
    },
    Monotone {
        p_w: Vec<MonotoneWeights>,
        r_w: Vec<MonotoneWeights>,
        comm: Option<CommEval>,
    },
}

pub(crate) struct CommEval {
    pub graph: Graph,
    pub cost: CostFamily,
    pub phi: Phi,
    pub c_hat: Vec<f64>,
}

impl CommEval {
    /// `chat .* (E~ phi(E~^T gradC(r)))` for integral values `r = r(s)`.
    pub(crate) fn term(&self, r_of_s: &[f64]) -> Vec<f64> {
        let marginals = self.cost.marginal_vec(r_of_s);
        let diffs = self.graph.apply_transpose_raw(&marginals);
        let flows: Vec<f64> = diffs.iter().map(|&z| self.phi.eval(z)).collect();
        let mut out = self.graph.apply_incidence_raw(&flows);
        for (o, &c) in out.iter_mut().zip(&self.c_hat) {
            *o *= c;
        }
        out
    }
}

impl ControllerEval {
    pub fn n(&self) -> usize {
        match &self.kind {
            EvalKind::Linear { kp, .. } => kp.len(),
            EvalKind::Dense { n, .. } => *n,
            EvalKind::Monotone { p_w, .. } => p_w.len(),
        }
    }

    pub fn output(&self, y: &[f64], y_bar: f64, s: &[f64]) -> Vec<f64> {
        match &self.kind {
            EvalKind::Linear { kp, ki } => (0..kp.len())
                .map(|i| kp[i] * (y_bar - y[i]) + ki[i] * s[i])
                .collect(),
            EvalKind::Dense { net, n } => {
                (0..*n).map(|i| net.forward(y_bar - y[i], s[i])).collect()
            }
            EvalKind::Monotone { p_w, r_w, .. } => (0..p_w.len())
                .map(|i| p_w[i].forward(y_bar - y[i]) + r_w[i].forward(s[i]))
                .collect(),
        }
    }

    pub fn s_deriv(&self, y: &[f64], y_bar: f64, s: &[f64]) -> Vec<f64> {
        let mut ds: Vec<f64> = y.iter().map(|&yi| -(yi - y_bar)).collect();
        if let EvalKind::Monotone {
            r_w,
            comm: Some(comm),
            ..
        } = &self.kind
        {
            let r_of_s: Vec<f64> = r_w.iter().zip(s).map(|(r, &si)| r.forward(si)).collect();
            let term = comm.term(&r_of_s);
            for (d, t) in ds.iter_mut().zip(term) {
                *d -= t;
            }
        }
        ds
    }

    /// `d w_i / d y_i` (the output depends on the local output only).
    pub fn dw_dy(&self, y: &[f64], y_bar: f64, s: &[f64], i: usize) -> f64 {
        match &self.kind {
            EvalKind::Linear { kp, .. } => -kp[i],
            EvalKind::Dense { net, .. } => -net.input_grads(y_bar - y[i], s[i]).0,
            EvalKind::Monotone { p_w, .. } => -p_w[i].grad_input(y_bar - y[i]),
        }
    }

    /// `d w_i / d s_i`.
    pub fn dw_ds(&self, y: &[f64], y_bar: f64, s: &[f64], i: usize) -> f64 {
        match &self.kind {
            EvalKind::Linear { ki, .. } => ki[i],
            EvalKind::Dense { net, .. } => net.input_grads(y_bar - y[i], s[i]).1,
            EvalKind::Monotone { r_w, .. } => r_w[i].grad_input(s[i]),
        }
    }

    pub(crate) fn comm(&self) -> Option<&CommEval> {
        match &self.kind {
            EvalKind::Monotone { comm, .. } => comm.as_ref(),
            _ => None,
        }
    }

    pub(crate) fn monotone_weights(&self) -> Option<(&[MonotoneWeights], &[MonotoneWeights])> {
        match &self.kind {
            EvalKind::Monotone { p_w, r_w, .. } => Some((p_w, r_w)),
            _ => None,
        }
    }

    /// Integral function `r_i` as an evaluable monotone scalar, if the
    /// variant has one (everything except the dense baseline).
    pub fn integral_fn(&self, i: usize) -> Result<IntegralFn<'_>> {
        match &self.kind {
            EvalKind::Linear { ki, .. } => Ok(IntegralFn::Linear(ki[i])),
            EvalKind::Monotone { r_w, .. } => Ok(IntegralFn::Net(&r_w[i])),
            EvalKind::Dense { .. } => Err(Error::UnsupportedController(
                "dense baseline has no monotone integral function",
            )),
        }
    }
}

/// Borrowed view of a node's integral function.
pub enum IntegralFn<'a> {
    Linear(f64),
    Net(&'a MonotoneWeights),
}

impl IntegralFn<'_> {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            IntegralFn::Linear(k) => k * z,
            IntegralFn::Net(w) => w.forward(z),
        }
    }

    pub fn antiderivative(&self, z: f64) -> f64 {
        match self {
            IntegralFn::Linear(k) => 0.5 * k * z * z,
            IntegralFn::Net(w) => w.antiderivative(z),
        }
    }

    pub fn grad(&self, z: f64) -> f64 {
        match self {
            IntegralFn::Linear(k) => *k,
            IntegralFn::Net(w) => w.grad_input(z),
        }
    }
}
