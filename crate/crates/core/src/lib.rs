//! Simulation, training, and verification toolkit for structured neural-PI
//! control of networked dynamical systems.
//!
//! Nodes (vehicles, generators) are coupled through edge dynamics over an
//! oriented graph. Controllers add an external input `w` per node; the
//! structured variants build `w` from strictly increasing scalar functions
//! parameterized as stacked-ReLU monotone networks, which makes stability and
//! output agreement structural properties rather than training outcomes. The
//! crate covers:
//!
//! - [`graph`]: oriented graphs and incidence operators,
//! - [`monotone`]: the constrained monotone network (materialization,
//!   evaluation, gradients, constructive interpolation),
//! - [`dynamics`]: node/edge families, closed-loop assembly, integrators,
//! - [`control`]: PI-style controller variants and cost families,
//! - [`train`]: losses, backpropagation through unrolled Euler rollouts, Adam,
//! - [`analysis`]: analytic equilibria, Lyapunov monitoring, KKT residuals.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature is
//! enabled by default.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod monotone;
pub mod train;

mod float;
mod linalg;

pub use error::Error;

/// Convenience result alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;
