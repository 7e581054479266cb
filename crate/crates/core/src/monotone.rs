//! Stacked-ReLU monotone scalar functions.
//!
//! The function family is
//!
//! ```text
//! g(z) = sum_j a+_j * relu(z - b+_j) + sum_j a-_j * relu(-z + b-_j) + floor * z
//! ```
//!
//! with ordered biases `0 = b+_1 <= ... <= b+_d`, `0 = b-_1 >= ... >= b-_d`
//! and sign-constrained prefix sums of the weights, which makes `g` piecewise
//! linear, nondecreasing, and exactly zero at the origin. Training works on
//! unconstrained parameters ([`MonotoneParams`]); [`MonotoneParams::materialize`]
//! squares and prefix-sums them into constrained weights
//! ([`MonotoneWeights`]), so the constraint set is preserved by any
//! gradient step. A small linear term `slope_floor * z` upgrades
//! "nondecreasing" to "strictly increasing" without moving the origin.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::float::sqrt;
use crate::Result;

/// Unconstrained parameters of a monotone function; free to train.
///
/// `alpha_*` have length `d`, `beta_*` length `d - 1`. `slope_floor` is a
/// fixed structural constant, not a trainable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneParams {
    pub alpha_plus: Vec<f64>,
    pub alpha_minus: Vec<f64>,
    pub beta_plus: Vec<f64>,
    pub beta_minus: Vec<f64>,
    pub slope_floor: f64,
}

/// Constrained weights produced by [`MonotoneParams::materialize`].
///
/// Invariants: `beta_plus[0] == beta_minus[0] == 0`, `beta_plus`
/// nondecreasing, `beta_minus` nonincreasing, and partial sums of
/// `alpha_plus` (resp. `alpha_minus`) nonnegative (resp. nonpositive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneWeights {
    pub alpha_plus: Vec<f64>,
    pub alpha_minus: Vec<f64>,
    pub beta_plus: Vec<f64>,
    pub beta_minus: Vec<f64>,
    pub slope_floor: f64,
}

/// Gradient with respect to [`MonotoneParams`]; same shapes as the params.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneGrad {
    pub alpha_plus: Vec<f64>,
    pub alpha_minus: Vec<f64>,
    pub beta_plus: Vec<f64>,
    pub beta_minus: Vec<f64>,
}

/// Default strict-monotonicity margin added to every materialized function.
pub const DEFAULT_SLOPE_FLOOR: f64 = 1e-6;

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl MonotoneParams {
    /// All-zero parameters; materializes to `g(z) = slope_floor * z`.
    pub fn zeros(d: usize, slope_floor: f64) -> Self {
        MonotoneParams {
            alpha_plus: vec![0.0; d],
            alpha_minus: vec![0.0; d],
            beta_plus: vec![0.0; d.saturating_sub(1)],
            beta_minus: vec![0.0; d.saturating_sub(1)],
            slope_floor,
        }
    }

    /// Parameters that materialize to `g(z) = slope * z` exactly.
    pub fn linear(d: usize, slope: f64) -> Self {
        let mut p = MonotoneParams::zeros(d, 0.0);
        // Repeated raw entries make every weight increment after the first
        // zero, so extra neurons are inert.
        let root = sqrt(slope);
        for j in 0..d {
            p.alpha_plus[j] = root;
            p.alpha_minus[j] = root;
        }
        p
    }

    /// Random initialization, deterministic under `seed`.
    ///
    /// Weight entries are uniform in `[-scale, scale]`; squaring keeps initial
    /// slopes within `scale^2`. Bias entries are small positive so the kinks
    /// start spread over roughly the unit interval. `scale = 0` materializes
    /// to `slope_floor * z`.
    pub fn init(d: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: f64, hi: f64| -> f64 {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..hi)
            }
        };
        let alpha_plus = (0..d).map(|_| draw(-scale, scale)).collect();
        let alpha_minus = (0..d).map(|_| draw(-scale, scale)).collect();
        let beta_plus = (0..d.saturating_sub(1)).map(|_| draw(0.05, 0.35)).collect();
        let beta_minus = (0..d.saturating_sub(1)).map(|_| draw(0.05, 0.35)).collect();
        MonotoneParams {
            alpha_plus,
            alpha_minus,
            beta_plus,
            beta_minus,
            slope_floor: DEFAULT_SLOPE_FLOOR,
        }
    }

    /// Random initialization with per-segment slopes drawn uniformly from
    /// `[slope_lo, slope_hi]`, deterministic under `seed`.
    ///
    /// Unlike [`init`](Self::init), every linear piece of the materialized
    /// function has a slope inside the band, which keeps feedback loops
    /// responsive everywhere. Used for edge feedback and well-conditioned
    /// controller starting points.
    pub fn init_banded(d: usize, seed: u64, slope_lo: f64, slope_hi: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MonotoneParams::zeros(d, DEFAULT_SLOPE_FLOOR);
        for j in 0..d {
            p.alpha_plus[j] = sqrt(rng.gen_range(slope_lo..slope_hi));
            p.alpha_minus[j] = sqrt(rng.gen_range(slope_lo..slope_hi));
        }
        for j in 0..d.saturating_sub(1) {
            p.beta_plus[j] = rng.gen_range(0.05..0.35);
            p.beta_minus[j] = rng.gen_range(0.05..0.35);
        }
        p
    }

    /// Neurons per branch.
    pub fn neurons(&self) -> usize {
        self.alpha_plus.len()
    }

    /// Squares and prefix-sums the raw parameters into constrained weights.
    ///
    /// `alpha+_1 = a~_1^2`, `alpha+_j = a~_j^2 - a~_{j-1}^2` (mirrored with
    /// negated signs for the minus branch); biases are signed prefix sums of
    /// squared entries with the first bias pinned to zero. The result
    /// satisfies the [`MonotoneWeights`] invariants for any input. Total
    /// function: never fails.
    pub fn materialize(&self) -> MonotoneWeights {
        let d = self.neurons();
        let mut alpha_plus = vec![0.0; d];
        let mut alpha_minus = vec![0.0; d];
        let mut beta_plus = vec![0.0; d];
        let mut beta_minus = vec![0.0; d];
        for j in 0..d {
            let sq_p = self.alpha_plus[j] * self.alpha_plus[j];
            let sq_m = self.alpha_minus[j] * self.alpha_minus[j];
            if j == 0 {
                alpha_plus[0] = sq_p;
                alpha_minus[0] = -sq_m;
            } else {
                let prev_p = self.alpha_plus[j - 1] * self.alpha_plus[j - 1];
                let prev_m = self.alpha_minus[j - 1] * self.alpha_minus[j - 1];
                alpha_plus[j] = sq_p - prev_p;
                alpha_minus[j] = -sq_m + prev_m;
            }
        }
        for j in 1..d {
            beta_plus[j] = beta_plus[j - 1] + self.beta_plus[j - 1] * self.beta_plus[j - 1];
            beta_minus[j] = beta_minus[j - 1] - self.beta_minus[j - 1] * self.beta_minus[j - 1];
        }
        MonotoneWeights {
            alpha_plus,
            alpha_minus,
            beta_plus,
            beta_minus,
            slope_floor: self.slope_floor,
        }
    }

    /// Number of trainable scalars: `4d - 2`.
    pub fn flat_len(&self) -> usize {
        4 * self.neurons() - 2
    }

    /// Appends parameters in `[alpha+, alpha-, beta+, beta-]` order.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.alpha_plus);
        out.extend_from_slice(&self.alpha_minus);
        out.extend_from_slice(&self.beta_plus);
        out.extend_from_slice(&self.beta_minus);
    }

    /// Reads parameters back in `write_flat` order.
    pub fn read_flat(&mut self, flat: &[f64]) {
        let d = self.neurons();
        debug_assert_eq!(flat.len(), self.flat_len());
        self.alpha_plus.copy_from_slice(&flat[..d]);
        self.alpha_minus.copy_from_slice(&flat[d..2 * d]);
        self.beta_plus.copy_from_slice(&flat[2 * d..3 * d - 1]);
        self.beta_minus.copy_from_slice(&flat[3 * d - 1..4 * d - 2]);
    }
}

impl MonotoneWeights {
    /// Identity function `g(z) = z` as materialized weights (handy in tests
    /// and as a fixed edge feedback).
    pub fn identity() -> Self {
        MonotoneWeights {
            alpha_plus: vec![1.0],
            alpha_minus: vec![-1.0],
            beta_plus: vec![0.0],
            beta_minus: vec![0.0],
            slope_floor: 0.0,
        }
    }

    pub fn neurons(&self) -> usize {
        self.alpha_plus.len()
    }

    /// Evaluates `g(z)`. `g(0) = 0` holds exactly.
    pub fn forward(&self, z: f64) -> f64 {
        let mut acc = self.slope_floor * z;
        for j in 0..self.neurons() {
            acc += self.alpha_plus[j] * relu(z - self.beta_plus[j]);
            acc += self.alpha_minus[j] * relu(-z + self.beta_minus[j]);
        }
        acc
    }

    /// Derivative `dg/dz` with the `relu'(0) = 0` convention: a neuron sitting
    /// exactly on its kink contributes nothing.
    pub fn grad_input(&self, z: f64) -> f64 {
        let mut acc = self.slope_floor;
        for j in 0..self.neurons() {
            if z > self.beta_plus[j] {
                acc += self.alpha_plus[j];
            }
            if z < self.beta_minus[j] {
                acc -= self.alpha_minus[j];
            }
        }
        acc
    }

    /// Average of the one-sided derivatives at `z`; agrees with
    /// [`grad_input`](Self::grad_input) away from kinks and gives the
    /// midpoint slope on them. Newton-type solvers use this so the Jacobian
    /// stays informative at the origin, where every materialized function has
    /// a kink.
    pub fn slope_symmetric(&self, z: f64) -> f64 {
        let mut right = self.slope_floor;
        let mut left = self.slope_floor;
        for j in 0..self.neurons() {
            if z >= self.beta_plus[j] {
                right += self.alpha_plus[j];
            }
            if z > self.beta_plus[j] {
                left += self.alpha_plus[j];
            }
            if z < self.beta_minus[j] {
                right -= self.alpha_minus[j];
            }
            if z <= self.beta_minus[j] {
                left -= self.alpha_minus[j];
            }
        }
        0.5 * (left + right)
    }

    /// Exact antiderivative `G(z) = int_0^z g`, with `G(0) = 0`.
    ///
    /// Piecewise quadratic in closed form; used for the Bregman distances of
    /// the Lyapunov function.
    pub fn antiderivative(&self, z: f64) -> f64 {
        let mut acc = 0.5 * self.slope_floor * z * z;
        for j in 0..self.neurons() {
            let up = relu(z - self.beta_plus[j]);
            let dn = relu(-z + self.beta_minus[j]);
            acc += 0.5 * self.alpha_plus[j] * up * up;
            acc -= 0.5 * self.alpha_minus[j] * dn * dn;
        }
        acc
    }
}

/// Gradient of `upstream * g(z)` with respect to the unconstrained params.
///
/// Composes the piecewise-linear gradient in the materialized weights with
/// the Jacobian of the squaring/prefix-sum reparameterization. Requires
/// `w == p.materialize()`.
pub fn grad_params(w: &MonotoneWeights, p: &MonotoneParams, z: f64, upstream: f64) -> MonotoneGrad {
    let d = p.neurons();
    let mut grad = MonotoneGrad {
        alpha_plus: vec![0.0; d],
        alpha_minus: vec![0.0; d],
        beta_plus: vec![0.0; d - 1],
        beta_minus: vec![0.0; d - 1],
    };
    grad_params_into(
        w,
        p,
        z,
        upstream,
        &mut grad.alpha_plus,
        &mut grad.alpha_minus,
        &mut grad.beta_plus,
        &mut grad.beta_minus,
    );
    grad
}

/// Accumulating form of [`grad_params`]; adds into the output slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn grad_params_into(
    w: &MonotoneWeights,
    p: &MonotoneParams,
    z: f64,
    upstream: f64,
    g_alpha_plus: &mut [f64],
    g_alpha_minus: &mut [f64],
    g_beta_plus: &mut [f64],
    g_beta_minus: &mut [f64],
) {
    if upstream == 0.0 {
        return;
    }
    let d = p.neurons();

    // d(g)/d(alpha~_j): alpha~_j^2 appears with +relu(z - b_j) at stage j and
    // -relu(z - b_{j+1}) at stage j+1 (mirrored for the minus branch).
    for j in 0..d {
        let act_p = relu(z - w.beta_plus[j]);
        let act_m = relu(-z + w.beta_minus[j]);
        let next_p = if j + 1 < d { relu(z - w.beta_plus[j + 1]) } else { 0.0 };
        let next_m = if j + 1 < d { relu(-z + w.beta_minus[j + 1]) } else { 0.0 };
        g_alpha_plus[j] += upstream * 2.0 * p.alpha_plus[j] * (act_p - next_p);
        g_alpha_minus[j] += upstream * -2.0 * p.alpha_minus[j] * (act_m - next_m);
    }

    // d(g)/d(beta_j) = -alpha_j * [z > b_j] for the plus branch (dead neurons
    // contribute nothing under the relu'(0) = 0 convention); each raw beta~_i
    // feeds every materialized bias with index > i. Suffix sums keep it O(d).
    let mut suffix_p = 0.0;
    let mut suffix_m = 0.0;
    for j in (1..d).rev() {
        if z > w.beta_plus[j] {
            suffix_p += -w.alpha_plus[j];
        }
        if z < w.beta_minus[j] {
            suffix_m += w.alpha_minus[j];
        }
        g_beta_plus[j - 1] += upstream * 2.0 * p.beta_plus[j - 1] * suffix_p;
        g_beta_minus[j - 1] += upstream * -2.0 * p.beta_minus[j - 1] * suffix_m;
    }
}

/// Builds unconstrained parameters whose materialization reproduces the
/// piecewise-linear interpolant of monotone samples on a uniform grid.
///
/// `zs` must be strictly increasing, uniformly spaced, and contain 0; `rs`
/// must be nondecreasing with `r(0) = 0` (within `1e-9`). Runs of equal slope
/// are merged, so a linear target needs a single neuron regardless of sample
/// count. `d` is the neuron budget per branch; an error is returned if the
/// merged interpolant needs more. The returned params carry `slope_floor = 0`
/// so the interpolant is reproduced exactly at the samples; the sup error on
/// the sampled interval is bounded by `L * tau` for an `L`-Lipschitz target.
pub fn interpolate_monotone(zs: &[f64], rs: &[f64], d: usize) -> Result<MonotoneParams> {
    const TOL: f64 = 1e-9;
    if zs.len() != rs.len() {
        return Err(Error::DimensionMismatch {
            expected: zs.len(),
            got: rs.len(),
        });
    }
    if zs.len() < 2 {
        return Err(Error::InvalidSamples("need at least two samples".into()));
    }
    if d == 0 {
        return Err(Error::InvalidSamples("need at least one neuron".into()));
    }
    let tau = zs[1] - zs[0];
    if tau <= 0.0 {
        return Err(Error::InvalidSamples("grid must be strictly increasing".into()));
    }
    for k in 1..zs.len() {
        let step = zs[k] - zs[k - 1];
        if (step - tau).abs() > TOL * tau.max(1.0) {
            return Err(Error::InvalidSamples(format!(
                "non-uniform grid: step {k} is {step}, expected {tau}"
            )));
        }
        if rs[k] < rs[k - 1] {
            return Err(Error::InvalidSamples(format!(
                "samples decrease between grid points {} and {}",
                k - 1,
                k
            )));
        }
    }
    let origin = match zs.iter().position(|&z| z.abs() <= TOL * tau.max(1.0)) {
        Some(idx) => idx,
        None => return Err(Error::InvalidSamples("grid must contain z = 0".into())),
    };
    if rs[origin].abs() > TOL {
        return Err(Error::InvalidSamples(format!(
            "r(0) = {} exceeds the origin tolerance",
            rs[origin]
        )));
    }

    // Knot positions and cumulative slopes per branch, with equal-slope runs
    // merged (tolerance scaled by the slope magnitude).
    let merge_tol = |a: f64| 1e-12 * a.abs().max(1.0);
    let mut pos_knots: Vec<(f64, f64)> = Vec::new(); // (bias, cumulative slope)
    for k in origin..zs.len() - 1 {
        let slope = (rs[k + 1] - rs[k]) / (zs[k + 1] - zs[k]);
        match pos_knots.last() {
            Some(&(_, prev)) if (slope - prev).abs() <= merge_tol(slope) => {}
            _ => pos_knots.push((zs[k] - zs[origin], slope)),
        }
    }
    let mut neg_knots: Vec<(f64, f64)> = Vec::new();
    for k in (0..origin).rev() {
        let slope = (rs[k + 1] - rs[k]) / (zs[k + 1] - zs[k]);
        match neg_knots.last() {
            Some(&(_, prev)) if (slope - prev).abs() <= merge_tol(slope) => {}
            _ => neg_knots.push((zs[k + 1] - zs[origin], slope)),
        }
    }
    let needed = pos_knots.len().max(neg_knots.len()).max(1);
    if needed > d {
        return Err(Error::InvalidSamples(format!(
            "{needed} neurons per branch needed, budget is {d}"
        )));
    }

    let mut params = MonotoneParams::zeros(d, 0.0);
    for (j, &(bias, cum_slope)) in pos_knots.iter().enumerate() {
        params.alpha_plus[j] = sqrt(cum_slope);
        if j > 0 {
            params.beta_plus[j - 1] = sqrt(bias - pos_knots[j - 1].0);
        }
    }
    // Unused neurons keep alpha~ equal to the last cumulative slope (zero
    // weight increment) and continue the bias grid.
    for j in pos_knots.len()..d {
        params.alpha_plus[j] = params.alpha_plus[j.saturating_sub(1)];
        if j > 0 {
            params.beta_plus[j - 1] = sqrt(tau);
        }
    }
    for (j, &(bias, cum_slope)) in neg_knots.iter().enumerate() {
        params.alpha_minus[j] = sqrt(cum_slope);
        if j > 0 {
            params.beta_minus[j - 1] = sqrt(-bias + neg_knots[j - 1].0);
        }
    }
    for j in neg_knots.len()..d {
        params.alpha_minus[j] = params.alpha_minus[j.saturating_sub(1)];
        if j > 0 {
            params.beta_minus[j - 1] = sqrt(tau);
        }
    }
    Ok(params)
}
