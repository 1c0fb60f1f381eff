//! Simulation and verification of spatial-average fluctuations for systems of
//! stochastic heat equations
//!
//! ```text
//! ∂u_i/∂t = ½∂²u_i/∂x² + Σ_j σ_ij(u)·Ẇ_j,   u_i(0, x) = 1,
//! ```
//!
//! driven by `m` independent space-time white noises. The crate simulates the
//! system on a truncated interval, computes the normalized averages
//! `F^R_i(t) = R^{-1/2}(∫_{−R}^{R} u_i(t, x)dx − 2R)`, and checks their
//! Gaussian fluctuations against deterministic covariance quadratures,
//! Malliavin–Stein bounds and statistical tests.

// Guards are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod malliavin;
pub mod model;
pub mod observables;
pub mod oracles;
pub mod report;
pub mod solver;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use model::{check_h1, heat_kernel, kernel_window, DiffusionField, H1Check, SigmaFamily};
pub use solver::{simulate, step_explicit, step_tangent, FieldState, Grid, GridSpec, NoiseStream, TangentState};
