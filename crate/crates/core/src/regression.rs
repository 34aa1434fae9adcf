//! The four regression fits behind the spatial context measures.
//!
//! Given patch features `X` and raw attention scores `y` over one image:
//!
//! - [`ols_fit`]: `y = X b + e`, the non-spatial baseline
//! - [`slx_fit`]: `y = X b + (WX) t + e`, spatially lagged features
//! - [`lag_fit_2sls`]: `y = rho (Wy) + X b + e`, spatial two-stage least
//!   squares with instruments `[1, X, WX, ..., W^q X]`
//! - [`error_fit_gmm`]: `y = X b + u`, `u = lambda (Wu) + e`, a one-shot
//!   generalized-method-of-moments estimate of `lambda` followed by a
//!   spatially filtered least-squares step for `b`
//!
//! Every fit reports a pseudo R-squared defined uniformly as the squared
//! Pearson correlation between `y` and the fitted values, which is what the
//! measures difference against. Classic `1 - SSR/SST` R-squared is reported
//! for the two fits that are plain least squares (OLS and SLX), where the two
//! definitions coincide up to rounding.

use nalgebra::{DMatrix, DVector};

use crate::analysis::pearson_corr;
use crate::error::{Error, Result};
use crate::linalg::{hcat, lstsq, with_intercept};
use crate::weights::SpatialWeights;

/// Feature design matrix (intercept excluded, added by the fits).
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    column_ids: Vec<usize>,
}

impl DesignMatrix {
    /// Validates finiteness and rejects constant columns, which belong to the
    /// intercept and would make every fit rank deficient.
    pub fn new(values: DMatrix<f64>, column_ids: Vec<usize>) -> Result<Self> {
        if values.ncols() != column_ids.len() {
            return Err(Error::DimensionError {
                expected: values.ncols(),
                got: column_ids.len(),
            });
        }
        if values.ncols() == 0 {
            return Err(Error::NoUsableFeatures(
                "design matrix has no columns".into(),
            ));
        }
        for (col, id) in values.column_iter().zip(&column_ids) {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite value in design column {id}"
                )));
            }
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(Error::InvalidArgument(format!(
                    "constant design column {id}"
                )));
            }
        }
        Ok(DesignMatrix { values, column_ids })
    }

    /// Select a subset of columns from a feature matrix, keeping their
    /// original indices as column ids.
    pub fn from_selected(features: &DMatrix<f64>, selected: &[usize]) -> Result<Self> {
        let mut values = DMatrix::zeros(features.nrows(), selected.len());
        for (out_j, &j) in selected.iter().enumerate() {
            if j >= features.ncols() {
                return Err(Error::InvalidArgument(format!(
                    "selected column {j} out of range ({} columns)",
                    features.ncols()
                )));
            }
            values.set_column(out_j, &features.column(j));
        }
        DesignMatrix::new(values, selected.to_vec())
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_ids(&self) -> &[usize] {
        &self.column_ids
    }
}

/// Which of the four models produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ols,
    Slx,
    Lag,
    Error,
}

/// How the spatial-lag model computes fitted values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LagPrediction {
    /// `Z delta` using the observed spatial lag of `y` (the default).
    #[default]
    Structural,
    /// Reduced form `(I - rho W)^{-1} X b`, solved iteratively.
    ReducedForm,
}

/// One fitted regression model.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub model: ModelKind,
    /// Intercept first, then one coefficient per design column.
    pub beta: Vec<f64>,
    /// SLX coefficients on the lagged feature block.
    pub theta: Option<Vec<f64>>,
    /// Spatial-lag coefficient (lag model only).
    pub rho: Option<f64>,
    /// Spatial-error coefficient (error model only).
    pub lambda: Option<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `1 - SSR/SST`; present for OLS and SLX.
    pub r2_classic: Option<f64>,
    /// Squared Pearson correlation between `y` and fitted values.
    pub r2_pseudo: f64,
    pub n: usize,
    pub p: usize,
}

fn check_shapes(x: &DesignMatrix, y: &[f64], extra_cols: usize) -> Result<()> {
    let n = x.n();
    if y.len() != n {
        return Err(Error::DimensionError {
            expected: n,
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in y".into()));
    }
    let width = x.p() + extra_cols + 1;
    if n <= width {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot identify {width} coefficients"
        )));
    }
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Err(Error::ZeroVariance("target vector is constant".into()));
    }
    Ok(())
}

fn r2_pseudo_of(y: &[f64], fitted: &[f64]) -> f64 {
    match pearson_corr(y, fitted) {
        Ok(r) => r * r,
        // Constant fitted values explain nothing.
        Err(_) => 0.0,
    }
}

fn r2_classic_of(y: &[f64], residuals: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let ssr: f64 = residuals.iter().map(|&r| r * r).sum();
    1.0 - ssr / sst
}

fn least_squares_fit(design: &DMatrix<f64>, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let yv = DVector::from_column_slice(y);
    let coefs = lstsq(design, &yv)?;
    let fitted_v = design * &coefs;
    let fitted: Vec<f64> = fitted_v.iter().copied().collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, f)| a - f).collect();
    Ok((coefs.iter().copied().collect(), fitted, residuals))
}

/// Ordinary least squares of `y` on `[1 | X]`.
pub fn ols_fit(x: &DesignMatrix, y: &[f64]) -> Result<RegressionFit> {
    check_shapes(x, y, 0)?;
    let design = with_intercept(x.values());
    let (beta, fitted, residuals) = least_squares_fit(&design, y)?;
    Ok(RegressionFit {
        model: ModelKind::Ols,
        beta,
        theta: None,
        rho: None,
        lambda: None,
        r2_classic: Some(r2_classic_of(y, &residuals)),
        r2_pseudo: r2_pseudo_of(y, &fitted),
        fitted,
        residuals,
        n: x.n(),
        p: x.p(),
    })
}

/// OLS on the augmented design `[1 | X | WX]`; the coefficients on the lagged
/// block are returned as `theta`.
pub fn slx_fit(x: &DesignMatrix, y: &[f64], w: &SpatialWeights) -> Result<RegressionFit> {
    check_shapes(x, y, x.p())?;
    if w.n() != x.n() {
        return Err(Error::DimensionError {
            expected: x.n(),
            got: w.n(),
        });
    }
    let wx = w.lag_matrix(x.values())?;
    let design = hcat(&with_intercept(x.values()), &wx);
    let (coefs, fitted, residuals) = least_squares_fit(&design, y)?;
    let p = x.p();
    let beta = coefs[..p + 1].to_vec();
    let theta = coefs[p + 1..].to_vec();
    Ok(RegressionFit {
        model: ModelKind::Slx,
        beta,
        theta: Some(theta),
        rho: None,
        lambda: None,
        r2_classic: Some(r2_classic_of(y, &residuals)),
        r2_pseudo: r2_pseudo_of(y, &fitted),
        fitted,
        residuals,
        n: x.n(),
        p,
    })
}

/// Spatial-lag model `y = rho (Wy) + X b + e` by two-stage least squares.
pub fn lag_fit_2sls(
    x: &DesignMatrix,
    y: &[f64],
    w: &SpatialWeights,
    instrument_order: usize,
) -> Result<RegressionFit> {
    lag_fit_2sls_with(x, y, w, instrument_order, LagPrediction::Structural)
}

/// [`lag_fit_2sls`] with an explicit choice of fitted-value construction.
pub fn lag_fit_2sls_with(
    x: &DesignMatrix,
    y: &[f64],
    w: &SpatialWeights,
    instrument_order: usize,
    prediction: LagPrediction,
) -> Result<RegressionFit> {
    if instrument_order == 0 {
        return Err(Error::InvalidArgument(
            "instrument_order must be at least 1".into(),
        ));
    }
    check_shapes(x, y, 1)?;
    if w.n() != x.n() {
        return Err(Error::DimensionError {
            expected: x.n(),
            got: w.n(),
        });
    }
    let n = x.n();
    let p = x.p();

    let wy = w.lag(y)?;
    // Instruments: [1, X, WX, W^2 X, ...] up to the requested order.
    let mut instruments = with_intercept(x.values());
    let mut lagged = x.values().clone();
    for _ in 0..instrument_order {
        lagged = w.lag_matrix(&lagged)?;
        instruments = hcat(&instruments, &lagged);
    }
    if n <= instruments.ncols() {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot support {} instrument columns",
            instruments.ncols()
        )));
    }

    // First stage: project the endogenous Wy onto the instrument space.
    let wy_v = DVector::from_column_slice(&wy);
    let first = lstsq(&instruments, &wy_v).map_err(|e| match e {
        Error::RankDeficient { cond } => Error::WeakInstruments { cond },
        other => other,
    })?;
    let wy_hat = &instruments * &first;

    // Second stage on [1, X, Wy_hat].
    let mut z_hat = with_intercept(x.values());
    z_hat = hcat(&z_hat, &DMatrix::from_column_slice(n, 1, wy_hat.as_slice()));
    let yv = DVector::from_column_slice(y);
    let sol = lstsq(&z_hat, &yv).map_err(|e| match e {
        Error::RankDeficient { cond } => Error::WeakInstruments { cond },
        other => other,
    })?;

    let rho = sol[p + 1];
    let beta: Vec<f64> = sol.iter().take(p + 1).copied().collect();

    let fitted: Vec<f64> = match prediction {
        LagPrediction::Structural => {
            // Z delta with the observed spatial lag, not the projected one.
            (0..n)
                .map(|i| {
                    let mut v = beta[0] + rho * wy[i];
                    for j in 0..p {
                        v += beta[j + 1] * x.values()[(i, j)];
                    }
                    v
                })
                .collect()
        }
        LagPrediction::ReducedForm => {
            if rho.abs() >= 1.0 {
                return Err(Error::NumericalFailure(format!(
                    "estimated rho {rho} outside (-1, 1); reduced form unavailable"
                )));
            }
            let xb: Vec<f64> = (0..n)
                .map(|i| {
                    let mut v = beta[0];
                    for j in 0..p {
                        v += beta[j + 1] * x.values()[(i, j)];
                    }
                    v
                })
                .collect();
            w.solve_spatial_filter(rho, &xb, 1e-12)?
        }
    };
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, f)| a - f).collect();
    Ok(RegressionFit {
        model: ModelKind::Lag,
        beta,
        theta: None,
        rho: Some(rho),
        lambda: None,
        r2_classic: None,
        r2_pseudo: r2_pseudo_of(y, &fitted),
        fitted,
        residuals,
        n,
        p,
    })
}

/// Moment residuals for the spatial-error coefficient search.
///
/// With `e(lambda) = u - lambda Wu`, the three conditions are
/// `e'e/n = s2`, `(We)'(We)/n = s2 tr(W'W)/n`, and `e'We/n = 0`.
struct ErrorMoments {
    uu: f64,
    uub: f64,
    ubub: f64,
    ubbub: f64,
    ubbubb: f64,
    uubb: f64,
    tr_ratio: f64,
}

impl ErrorMoments {
    fn new(u: &[f64], w: &SpatialWeights) -> Result<Self> {
        let n = u.len() as f64;
        let ub = w.lag(u)?;
        let ubb = w.lag(&ub)?;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
        Ok(ErrorMoments {
            uu: dot(u, u),
            uub: dot(u, &ub),
            ubub: dot(&ub, &ub),
            ubbub: dot(&ub, &ubb),
            ubbubb: dot(&ubb, &ubb),
            uubb: dot(u, &ubb),
            tr_ratio: w.tr_wtw() / n,
        })
    }

    /// Squared norm of the moment residuals at `lambda`, with the error
    /// variance concentrated out.
    fn objective(&self, lambda: f64) -> f64 {
        let g1 = self.uu - 2.0 * lambda * self.uub + lambda * lambda * self.ubub;
        let g2 = self.ubub - 2.0 * lambda * self.ubbub + lambda * lambda * self.ubbubb;
        let g3 = self.uub - lambda * (self.ubub + self.uubb) + lambda * lambda * self.ubbub;
        let t = self.tr_ratio;
        let sigma2 = ((g1 + t * g2) / (1.0 + t * t)).max(0.0);
        let r1 = g1 - sigma2;
        let r2 = g2 - sigma2 * t;
        r1 * r1 + r2 * r2 + g3 * g3
    }
}

const LAMBDA_BOUND: f64 = 0.99;
const GMM_MAX_ITER: usize = 200;

/// Minimize the moment objective over `lambda in (-0.99, 0.99)` by a coarse
/// scan followed by golden-section refinement.
fn minimize_lambda(m: &ErrorMoments) -> Result<f64> {
    const GRID: usize = 397;
    let step = 2.0 * LAMBDA_BOUND / (GRID - 1) as f64;
    let mut best = (f64::INFINITY, 0.0);
    for g in 0..GRID {
        let lambda = -LAMBDA_BOUND + step * g as f64;
        let v = m.objective(lambda);
        if v < best.0 {
            best = (v, lambda);
        }
    }
    let mut lo = (best.1 - step).max(-LAMBDA_BOUND);
    let mut hi = (best.1 + step).min(LAMBDA_BOUND);
    let inv_phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = m.objective(x1);
    let mut f2 = m.objective(x2);
    for _ in 0..GMM_MAX_ITER {
        if hi - lo < 1e-10 {
            return Ok(0.5 * (lo + hi));
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = m.objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = m.objective(x2);
        }
    }
    Err(Error::NoConvergence {
        iterations: GMM_MAX_ITER,
    })
}

/// Spatial-error model by generalized method of moments.
///
/// One-shot: an OLS pass supplies residuals, the moment system yields
/// `lambda`, and a single spatially filtered least-squares pass re-estimates
/// the coefficients. Fitted values are `[1 X] b` on the untransformed design.
pub fn error_fit_gmm(x: &DesignMatrix, y: &[f64], w: &SpatialWeights) -> Result<RegressionFit> {
    let ols = ols_fit(x, y)?;
    if w.n() != x.n() {
        return Err(Error::DimensionError {
            expected: x.n(),
            got: w.n(),
        });
    }
    let moments = ErrorMoments::new(&ols.residuals, w)?;
    let lambda = minimize_lambda(&moments)?;

    // Spatially filtered regression: (I - lambda W) applied to y, the
    // intercept column, and X.
    let n = x.n();
    let p = x.p();
    let wy = w.lag(y)?;
    let ones = vec![1.0; n];
    let w_ones = w.lag(&ones)?;
    let wx = w.lag_matrix(x.values())?;
    let mut design = DMatrix::zeros(n, p + 1);
    let mut ys = vec![0.0; n];
    for i in 0..n {
        ys[i] = y[i] - lambda * wy[i];
        design[(i, 0)] = 1.0 - lambda * w_ones[i];
        for j in 0..p {
            design[(i, j + 1)] = x.values()[(i, j)] - lambda * wx[(i, j)];
        }
    }
    let ys_v = DVector::from_column_slice(&ys);
    let sol = lstsq(&design, &ys_v)?;
    let beta: Vec<f64> = sol.iter().copied().collect();

    let fitted: Vec<f64> = (0..n)
        .map(|i| {
            let mut v = beta[0];
            for j in 0..p {
                v += beta[j + 1] * x.values()[(i, j)];
            }
            v
        })
        .collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, f)| a - f).collect();
    Ok(RegressionFit {
        model: ModelKind::Error,
        beta,
        theta: None,
        rho: None,
        lambda: Some(lambda),
        r2_classic: None,
        r2_pseudo: r2_pseudo_of(y, &fitted),
        fitted,
        residuals,
        n,
        p,
    })
}
