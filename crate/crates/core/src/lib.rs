//! Blind source separation toolkit.
//!
//! Provides a flexible ICA engine driven by maximum-entropy density
//! estimation, MGGD parameter estimators (method of moments, fixed point,
//! Fisher scoring, Riemannian-averaged fixed point), IVA with an adaptive
//! MGGD source model, sparsity-regularized ICA, synthetic data generators,
//! separation metrics, and a reproducible experiment harness.

pub mod bench;
pub mod error;
pub mod ica;
pub mod io;
pub mod iva;
pub mod maxent;
pub mod metrics;
pub mod mggd;
pub mod seed;
pub mod sources;

pub use error::{Error, Result};

/// Toolkit version recorded in experiment results.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
