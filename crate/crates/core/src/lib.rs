//! Desk-scale continual-learning update machinery.
//!
//! The crate implements, end to end, the pieces needed to train a small
//! network task by task without revisiting old samples and without losing
//! what earlier tasks taught it:
//!
//! - [`linalg`]: dense row-major f64 kernels (product, Frobenius norm, thin
//!   Householder QR, Cholesky solve) with deterministic accumulation,
//! - [`lora`]: low-rank adapters `W = W0 + s * B * A` over a frozen base,
//! - [`subspace`]: online estimation of the activation subspace of past
//!   tasks on the Stiefel manifold, plus an offline SVD baseline,
//! - [`rectify`]: safe projection of weight-space gradients away from the
//!   protected subspace, and the two-stage ridge rectification that turns a
//!   projected gradient into factor increments whose composite stays safe,
//! - [`dml`]: a decoupled margin loss over class prototypes that pulls
//!   current-task features together while pushing them away from frozen
//!   prototypes of earlier tasks,
//! - [`model`]: a small adapted tanh network with an exact manual backward
//!   pass and a growing classification head,
//! - [`harness`]: synthetic task streams, the training loop, continual
//!   learning metrics, ablations, diagnostics, and CSV reports,
//! - [`oracle`] / [`selftest`]: independent reference implementations used
//!   only for verification.

pub mod dml;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod oracle;
pub mod rectify;
pub mod rng;
pub mod selftest;
pub mod subspace;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use linalg::Matrix;
