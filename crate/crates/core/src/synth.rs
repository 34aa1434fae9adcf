//! Seeded synthetic data generators with known spatial parameters.
//!
//! Four data-generating processes cover the regression models one to one:
//! no spatial signal, spatially lagged features, a spatially lagged target,
//! and spatially autocorrelated errors. Because the generating parameter is
//! known, every estimator and the full pipeline can be checked against
//! ground truth. The generating weights use the same kNN construction as fit
//! time; generating at one k and fitting at another deliberately mismatched
//! k emulates neighborhood misspecification.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{ImageClass, ImageTensorSet, Split};
use crate::rng::{derive_seed, rng_from_seed};
use crate::weights::{GridCoords, SpatialWeights};

/// Lattice shape and the fraction of cells removed as holes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    #[serde(default)]
    pub hole_fraction: f64,
}

/// Where the spatial signal enters the attention target, with its strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalKind {
    /// a = X beta + noise.
    None,
    /// a = X beta + theta * rowsum(WX) + noise; every lagged column carries
    /// the common coefficient theta.
    Features { theta: f64 },
    /// a = (I - rho W)^{-1} (X beta + noise).
    Targets { rho: f64 },
    /// a = X beta + u with u = (I - lambda W)^{-1} noise.
    Residuals { lambda: f64 },
}

/// Full recipe for one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub grid: GridSpec,
    /// Neighborhood size of the generating weights.
    pub k: usize,
    /// Feature count.
    pub p: usize,
    /// Coefficients on the feature columns, length p.
    pub beta: Vec<f64>,
    pub signal: SignalKind,
    pub noise_sigma: f64,
    pub seed: u64,
}

const GRID_TAG: u64 = 0x6772_6964;
const FEATURES_TAG: u64 = 0x6665_6174;
const NOISE_TAG: u64 = 0x6e6f_6973;
const SOLVE_TOL: f64 = 1e-12;

impl SynthSpec {
    fn cells(&self) -> usize {
        self.grid.rows as usize * self.grid.cols as usize
    }

    fn hole_count(&self) -> usize {
        (self.grid.hole_fraction * self.cells() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return Err(Error::InvalidSpec("grid must have positive extent".into()));
        }
        if !(0.0..1.0).contains(&self.grid.hole_fraction) {
            return Err(Error::InvalidSpec(format!(
                "hole_fraction must lie in [0, 1), got {}",
                self.grid.hole_fraction
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidSpec("k must be positive".into()));
        }
        if self.p == 0 {
            return Err(Error::InvalidSpec("p must be positive".into()));
        }
        if self.beta.len() != self.p {
            return Err(Error::InvalidSpec(format!(
                "beta has {} entries but p = {}",
                self.beta.len(),
                self.p
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        match self.signal {
            SignalKind::None => {}
            SignalKind::Features { theta } => {
                if !theta.is_finite() {
                    return Err(Error::InvalidSpec("theta must be finite".into()));
                }
            }
            SignalKind::Targets { rho } => {
                if !(rho.is_finite() && rho.abs() < 1.0) {
                    return Err(Error::InvalidSpec(format!(
                        "rho must satisfy |rho| < 1, got {rho}"
                    )));
                }
            }
            SignalKind::Residuals { lambda } => {
                if !(lambda.is_finite() && lambda.abs() < 1.0) {
                    return Err(Error::InvalidSpec(format!(
                        "lambda must satisfy |lambda| < 1, got {lambda}"
                    )));
                }
            }
        }
        let survivors = self.cells() - self.hole_count();
        let needed = (self.k + 1).max(self.p + 2);
        if survivors < needed {
            return Err(Error::InvalidSpec(format!(
                "{survivors} surviving cells cannot support k = {} and p = {} (need {needed})",
                self.k, self.p
            )));
        }
        Ok(())
    }
}

/// The lattice with `hole_fraction` cells removed uniformly at random.
/// Survivors keep row-major order; identical for identical specs.
pub fn gen_grid(spec: &SynthSpec) -> Result<GridCoords> {
    spec.validate()?;
    let cells = spec.cells();
    let holes = spec.hole_count();
    let cols = spec.grid.cols;
    if holes == 0 {
        return GridCoords::full_grid(spec.grid.rows, spec.grid.cols);
    }
    let mut rng = rng_from_seed(derive_seed(spec.seed, GRID_TAG));
    let mut removed = vec![false; cells];
    for idx in rand::seq::index::sample(&mut rng, cells, holes) {
        removed[idx] = true;
    }
    let positions: Vec<(u32, u32)> = (0..cells)
        .filter(|&i| !removed[i])
        .map(|i| (i as u32 / cols, i as u32 % cols))
        .collect();
    GridCoords::new(positions)
}

fn standard_normals(rng: &mut impl rand::Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| StandardNormal.sample(rng)).collect()
}

/// One synthetic image with `n_folds` independent noise draws sharing the
/// same grid and features.
pub fn gen_image_folds(spec: &SynthSpec, n_folds: usize) -> Result<ImageTensorSet> {
    let coords = gen_grid(spec)?;
    gen_image_folds_on(spec, coords, n_folds)
}

/// [`gen_image_folds`] on an externally supplied grid. Lets several
/// generated variants (different seeds, e.g. one per model) share one
/// image's geometry while drawing their own features and noise.
pub fn gen_image_folds_on(
    spec: &SynthSpec,
    coords: GridCoords,
    n_folds: usize,
) -> Result<ImageTensorSet> {
    spec.validate()?;
    if n_folds == 0 {
        return Err(Error::InvalidArgument("n_folds must be positive".into()));
    }
    let n = coords.len();
    let needed = (spec.k + 1).max(spec.p + 2);
    if n < needed {
        return Err(Error::InvalidSpec(format!(
            "{n} cells cannot support k = {} and p = {} (need {needed})",
            spec.k, spec.p
        )));
    }
    let w = SpatialWeights::knn(&coords, spec.k)?;

    // Row-by-row fill fixes the draw order regardless of matrix layout.
    let mut rng_x = rng_from_seed(derive_seed(spec.seed, FEATURES_TAG));
    let mut features = DMatrix::zeros(n, spec.p);
    for i in 0..n {
        for j in 0..spec.p {
            features[(i, j)] = StandardNormal.sample(&mut rng_x);
        }
    }

    let xb: Vec<f64> = (0..n)
        .map(|i| (0..spec.p).map(|j| features[(i, j)] * spec.beta[j]).sum())
        .collect();
    let lag_rowsum: Option<Vec<f64>> = match spec.signal {
        SignalKind::Features { .. } => {
            let wx = w.lag_matrix(&features)?;
            Some(
                (0..n)
                    .map(|i| (0..spec.p).map(|j| wx[(i, j)]).sum())
                    .collect(),
            )
        }
        _ => None,
    };

    let mut attention = DMatrix::zeros(n, n_folds);
    let noise_root = derive_seed(spec.seed, NOISE_TAG);
    for fold in 0..n_folds {
        let mut rng_e = rng_from_seed(derive_seed(noise_root, fold as u64));
        let eps: Vec<f64> = standard_normals(&mut rng_e, n)
            .into_iter()
            .map(|e| e * spec.noise_sigma)
            .collect();
        let a: Vec<f64> = match spec.signal {
            SignalKind::None => xb.iter().zip(&eps).map(|(b, e)| b + e).collect(),
            SignalKind::Features { theta } => {
                let rowsum = lag_rowsum.as_ref().expect("computed above");
                (0..n).map(|i| xb[i] + theta * rowsum[i] + eps[i]).collect()
            }
            SignalKind::Targets { rho } => {
                let rhs: Vec<f64> = xb.iter().zip(&eps).map(|(b, e)| b + e).collect();
                w.solve_spatial_filter(rho, &rhs, SOLVE_TOL)?
            }
            SignalKind::Residuals { lambda } => {
                let u = w.solve_spatial_filter(lambda, &eps, SOLVE_TOL)?;
                (0..n).map(|i| xb[i] + u[i]).collect()
            }
        };
        for i in 0..n {
            attention[(i, fold)] = a[i];
        }
    }

    ImageTensorSet::new(
        format!("synth-{:016x}", spec.seed),
        "synth".to_string(),
        coords,
        features,
        attention,
        ImageClass::Normal,
        Split::Train,
        None,
    )
}

/// [`gen_image_folds`] with a single fold.
pub fn gen_image(spec: &SynthSpec) -> Result<ImageTensorSet> {
    gen_image_folds(spec, 1)
}
