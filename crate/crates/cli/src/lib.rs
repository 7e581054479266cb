//! Command-line companion to `neuralpi-core`: experiment configuration,
//! file formats (trajectory CSV, summary/report JSON, checkpoints), and the
//! simulate / train / verify / equilibrium / export-monotone pipelines.

pub mod commands;
pub mod config;
pub mod io;
