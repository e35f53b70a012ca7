//! Reconstruction of room-transfer-function magnitudes on a 32×32
//! microphone grid from sparse observations.
//!
//! The crate bundles a modal room simulator, a corpus builder, a
//! Helmholtz-kernel ridge-regression baseline, a conditional denoising
//! diffusion model trained to inpaint the unobserved cells, and an
//! evaluation harness (NMSE sweeps, heatmaps). The `sfdiff` binary wires
//! everything into `simulate` / `dataset` / `train` / `reconstruct` /
//! `eval` subcommands.

pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kernel_baseline;
pub mod room_acoustics;
pub mod rng;

pub use error::{Error, Result};
