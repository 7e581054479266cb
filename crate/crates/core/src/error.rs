//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors produced by graph construction, simulation, solvers, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Graph invariants violated (self-loop, out-of-range node index, ...).
    InvalidGraph(String),
    /// A vector argument does not match the expected dimension.
    DimensionMismatch { expected: usize, got: usize },
    /// Random regular graph generation exhausted its retry budget.
    GraphGenerationFailed(String),
    /// Monotone interpolation input rejected (non-monotone samples,
    /// non-uniform grid, value at the origin, or too few neurons).
    InvalidSamples(String),
    /// State became non-finite during integration; reports the step index.
    IntegrationBlowup { step: usize },
    /// Gradient became non-finite during backpropagation.
    NonFiniteGradient { step: usize },
    /// Loss became non-finite during training; reports the episode.
    NonFiniteLoss { episode: usize },
    /// No feasible closed-loop equilibrium (integral function cannot reach the
    /// required setpoint, or the edge-balance solve failed).
    InfeasibleEquilibrium(String),
    /// Newton iteration on the edge-balance equations did not converge.
    SolverDiverged(String),
    /// Operation not defined for this controller variant.
    UnsupportedController(&'static str),
    /// Invalid parameter value for a model or config item.
    InvalidParameter(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidGraph(msg) => write!(f, "invalid graph: {msg}"),
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::GraphGenerationFailed(msg) => write!(f, "graph generation failed: {msg}"),
            Error::InvalidSamples(msg) => write!(f, "invalid samples: {msg}"),
            Error::IntegrationBlowup { step } => {
                write!(f, "integration produced a non-finite state at step {step}")
            }
            Error::NonFiniteGradient { step } => {
                write!(f, "non-finite gradient at rollout step {step}")
            }
            Error::NonFiniteLoss { episode } => {
                write!(f, "non-finite loss in episode {episode}")
            }
            Error::InfeasibleEquilibrium(msg) => write!(f, "infeasible equilibrium: {msg}"),
            Error::SolverDiverged(msg) => write!(f, "solver diverged: {msg}"),
            Error::UnsupportedController(what) => {
                write!(f, "operation not supported for this controller: {what}")
            }
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
