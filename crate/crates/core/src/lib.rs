//! Quantify how much spatial context an attention-based vision model
//! preserves, image by image.
//!
//! The core workflow regresses a model's raw attention scores on its patch
//! features four ways (plain OLS, OLS with spatially lagged features, a
//! spatial-lag model fit by two-stage least squares, and a spatial-error
//! model fit by generalized method of moments) and reports the gain of each
//! spatial variant over OLS as three spatial context measures per image.
//! Moran's I permutation tests gate the spatial fits; LISA provides local
//! cluster labels; the synthetic generators produce data with known spatial
//! parameters so every estimator can be checked against ground truth.
//!
//! Modules:
//!
//! - [`weights`]: sparse spatial weights (kNN, queen, rook) and spatial lags
//! - [`regression`]: the four regression fits
//! - [`diagnostics`]: global Moran's I, permutation tests, LISA
//! - [`pipeline`]: the per-image measurement pipeline
//! - [`synth`]: seeded data-generating processes with known parameters
//! - [`analysis`]: dataset-level aggregation, selection, and test statistics
//!
//! All randomized routines take explicit seeds and are deterministic for a
//! given seed regardless of the `parallel` feature or worker count.

pub mod analysis;
pub mod diagnostics;
mod error;
mod linalg;
mod par;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod synth;
pub mod weights;

pub use error::{Error, Result};

/// Alternative hypothesis for one-sample permutation tests and two-sample
/// mean comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Right tail only (positive autocorrelation / first mean greater).
    #[default]
    Greater,
    /// Both tails.
    TwoSided,
}
