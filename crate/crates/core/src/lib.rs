//! SpodNet: neural layers that map SPD matrices to SPD matrices by rewriting
//! one column-row pair at a time and restoring positive-definiteness through
//! the Schur complement of the updated pivot.
//!
//! The crate contains everything needed to train and evaluate the three
//! sparse-precision models built on that layer:
//!
//! - [`autodiff`]: a small tape-based reverse-mode engine over dense `f64` tensors.
//! - [`linalg`]: Cholesky, SPD inverse, block partitions and a Jacobi eigensolver.
//! - [`layer`]: the column-row update layer, the O(p²) inverse maintenance and
//!   spectral diagnostics.
//! - [`models`]: the UBG, PNP and E2E update networks and the diagonal network.
//! - [`baselines`]: graphical lasso, Ledoit-Wolf and OAS.
//! - [`datagen`]: synthetic sparse precision matrices and the dataset format.
//! - [`train`] and [`metrics`]: MSE training with Adam, NMSE / F1 / spectral traces.

// NaN must fail validation, so `!(x > 0.0)` is the intended form.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod datagen;
mod error;
pub mod layer;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{BlockView, SymMatrix};
pub use models::{ModelParams, Variant};
