//! Score-based diffusion for audio restoration.
//!
//! The crate is organised bottom-up:
//!
//! - [`process`]: forward SDE families and their Gaussian transition kernels.
//! - [`score`]: score fields (analytic Gaussian mixtures, a small learned MLP),
//!   denoising score matching and classifier-free guidance.
//! - [`solver`]: time grids and reverse-time SDE / probability-flow ODE integration.
//! - [`operator`]: degradation operators with adjoints and parameter gradients.
//! - [`posterior`]: posterior sampling, projection, blind estimation and
//!   two-stage (predictive + generative) restoration.
//! - [`signal`]: WAV I/O, STFT, magnitude compression, spectrogram export.
//! - [`verify`]: independent oracles used by the test suites.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod operator;
pub mod posterior;
pub mod process;
pub mod rng;
pub mod score;
pub mod signal;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
pub use process::{DiffusionProcess, ForwardSde, KernelMoments, ProcessKind, Schedule};
