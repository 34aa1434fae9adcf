//! The per-image measurement pipeline: collinearity filtering, the OLS
//! baseline, the Moran gate on its residuals, the three spatial fits, and
//! the three spatial context measures.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::pearson_corr;
use crate::diagnostics::{morans_test_with, MoranResult};
use crate::error::{Error, Result};
use crate::regression::{
    error_fit_gmm, lag_fit_2sls_with, ols_fit, slx_fit, DesignMatrix, LagPrediction,
};
use crate::rng::task_seed;
use crate::weights::{GridCoords, SpatialWeights};
use crate::Alternative;

/// Tissue class of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageClass {
    Normal,
    Tumor,
}

impl std::fmt::Display for ImageClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImageClass::Normal => "normal",
            ImageClass::Tumor => "tumor",
        })
    }
}

impl std::str::FromStr for ImageClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ImageClass::Normal),
            "tumor" => Ok(ImageClass::Tumor),
            other => Err(Error::InvalidArgument(format!(
                "unknown label {other:?}; expected normal or tumor"
            ))),
        }
    }
}

/// Dataset split of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train or test"
            ))),
        }
    }
}

/// Everything extracted for one image: patch grid coordinates, patch
/// features, and one column of raw attention scores per fold.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensorSet {
    pub image_id: String,
    pub model_id: String,
    pub coords: GridCoords,
    /// N x P patch features.
    pub features: DMatrix<f64>,
    /// N x F raw attention scores, one column per fold.
    pub attention: DMatrix<f64>,
    pub label: ImageClass,
    pub split: Split,
    pub tumor_patch_coords: Option<Vec<(i64, i64)>>,
}

impl ImageTensorSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_id: String,
        model_id: String,
        coords: GridCoords,
        features: DMatrix<f64>,
        attention: DMatrix<f64>,
        label: ImageClass,
        split: Split,
        tumor_patch_coords: Option<Vec<(i64, i64)>>,
    ) -> Result<Self> {
        let n = coords.len();
        if features.nrows() != n {
            return Err(Error::DimensionError {
                expected: n,
                got: features.nrows(),
            });
        }
        if attention.nrows() != n {
            return Err(Error::DimensionError {
                expected: n,
                got: attention.nrows(),
            });
        }
        if attention.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "image {image_id:?} has no attention folds"
            )));
        }
        if attention.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "image {image_id:?} has non-finite attention scores"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "image {image_id:?} has non-finite feature values"
            )));
        }
        Ok(ImageTensorSet {
            image_id,
            model_id,
            coords,
            features,
            attention,
            label,
            split,
            tumor_patch_coords,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.coords.len()
    }

    pub fn n_folds(&self) -> usize {
        self.attention.ncols()
    }
}

/// Pipeline parameters. Defaults follow the standard configuration:
/// correlation threshold 0.6, gate level 0.05, 999 permutations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScmOptions {
    /// Collinearity filter threshold on |Pearson correlation|.
    pub gamma: f64,
    /// Moran gate significance level.
    pub alpha: f64,
    pub n_permutations: usize,
    pub master_seed: u64,
    /// Highest power of W used to build 2SLS instruments.
    pub instrument_order: usize,
    pub moran_alternative: Alternative,
    pub lag_prediction: LagPrediction,
}

impl Default for ScmOptions {
    fn default() -> Self {
        ScmOptions {
            gamma: 0.6,
            alpha: 0.05,
            n_permutations: 999,
            master_seed: 0,
            instrument_order: 1,
            moran_alternative: Alternative::Greater,
            lag_prediction: LagPrediction::Structural,
        }
    }
}

/// The spatial fits and measures, present only when the Moran gate passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpatialScms {
    /// Pseudo R-squared of the lagged-features model.
    pub r2_wx: f64,
    pub r2_wx_classic: f64,
    /// Pseudo R-squared of the spatial-lag model.
    pub r2_lag: f64,
    /// Pseudo R-squared of the spatial-error model.
    pub r2_error: f64,
    pub rho: f64,
    pub lambda: f64,
    pub scm_features: f64,
    /// Classic-R-squared variant of the features measure; non-negative by
    /// nesting.
    pub scm_features_classic: f64,
    pub scm_targets: f64,
    pub scm_residuals: f64,
}

/// Result of the pipeline for one (image, fold, k) task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScmResult {
    pub image_id: String,
    pub model_id: String,
    pub fold: usize,
    pub k: usize,
    pub n_regions: usize,
    pub retained_columns: Vec<usize>,
    /// Gamma actually used after any tightening for small images.
    pub effective_gamma: f64,
    /// Pseudo R-squared of the OLS baseline.
    pub r2_ols: f64,
    pub r2_ols_classic: f64,
    pub moran: MoranResult,
    /// True when the gate found no spatial autocorrelation in the OLS
    /// residuals (pseudo p above alpha); `spatial` is then `None`.
    pub skipped: bool,
    pub spatial: Option<SpatialScms>,
}

/// Greedy collinearity filter. Zero-variance columns are dropped first; then
/// a left-to-right scan retains column j iff its absolute Pearson
/// correlation with every already retained column is at most `gamma`.
pub fn filter_collinear(features: &DMatrix<f64>, gamma: f64) -> Result<Vec<usize>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let n = features.nrows();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "collinearity filter needs at least 3 rows, got {n}"
        )));
    }
    // Center once; a zero norm marks a zero-variance column.
    let mut centered: Vec<Vec<f64>> = Vec::with_capacity(features.ncols());
    let mut norms: Vec<f64> = Vec::with_capacity(features.ncols());
    for j in 0..features.ncols() {
        let col = features.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let c: Vec<f64> = col.iter().map(|v| v - mean).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        centered.push(c);
        norms.push(norm);
    }
    let mut retained: Vec<usize> = Vec::new();
    for j in 0..features.ncols() {
        if norms[j] == 0.0 {
            continue;
        }
        let ok = retained.iter().all(|&r| {
            let dot: f64 = centered[j]
                .iter()
                .zip(&centered[r])
                .map(|(a, b)| a * b)
                .sum();
            // Rounding can push a perfect correlation a hair past 1.
            (dot / (norms[j] * norms[r])).clamp(-1.0, 1.0).abs() <= gamma
        });
        if ok {
            retained.push(j);
        }
    }
    if retained.is_empty() {
        return Err(Error::NoUsableFeatures(
            "every feature column has zero variance".into(),
        ));
    }
    Ok(retained)
}

/// Lowest gamma the tightening loop will try.
const GAMMA_FLOOR: f64 = 0.05;
const GAMMA_STEP: f64 = 0.05;

/// Filter with the configured gamma, tightening in 0.05 steps while the
/// retained count leaves fewer than two residual degrees of freedom.
/// Returns the retained column ids and the gamma actually used.
pub fn filter_with_tightening(
    features: &DMatrix<f64>,
    gamma: f64,
    n: usize,
) -> Result<(Vec<usize>, f64)> {
    let mut step = 0u32;
    loop {
        let effective = gamma - GAMMA_STEP * step as f64;
        if effective < GAMMA_FLOOR - 1e-9 {
            return Err(Error::InsufficientData(format!(
                "{n} regions cannot support the retained features even at gamma {GAMMA_FLOOR}"
            )));
        }
        let retained = filter_collinear(features, effective)?;
        if n > retained.len() + 1 {
            return Ok((retained, effective));
        }
        step += 1;
    }
}

/// Run the full measurement pipeline for one image, fold and neighborhood
/// size. All randomness descends from a seed hashed out of
/// (master_seed, image_id, fold, k), so results are identical regardless of
/// scheduling.
pub fn run_image(
    data: &ImageTensorSet,
    fold: usize,
    k: usize,
    opts: &ScmOptions,
) -> Result<ScmResult> {
    run_image_inner(data, fold, k, opts).map_err(|e| e.with_image_context(&data.image_id, fold, k))
}

fn run_image_inner(
    data: &ImageTensorSet,
    fold: usize,
    k: usize,
    opts: &ScmOptions,
) -> Result<ScmResult> {
    if fold >= data.n_folds() {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} out of range ({} folds)",
            data.n_folds()
        )));
    }
    if !(opts.alpha > 0.0 && opts.alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {}",
            opts.alpha
        )));
    }
    let n = data.n_regions();
    let seed = task_seed(opts.master_seed, &data.image_id, fold, k);

    let (retained, effective_gamma) = filter_with_tightening(&data.features, opts.gamma, n)?;
    let x = DesignMatrix::from_selected(&data.features, &retained)?;
    let y: Vec<f64> = data.attention.column(fold).iter().copied().collect();

    let w = SpatialWeights::knn(&data.coords, k)?;
    let ols = ols_fit(&x, &y)?;
    let moran = morans_test_with(
        &ols.residuals,
        &w,
        opts.n_permutations,
        seed,
        opts.moran_alternative,
    )?;

    let r2_ols = ols.r2_pseudo;
    let r2_ols_classic = ols.r2_classic.expect("ols reports classic r2");
    let base = ScmResult {
        image_id: data.image_id.clone(),
        model_id: data.model_id.clone(),
        fold,
        k,
        n_regions: n,
        retained_columns: retained,
        effective_gamma,
        r2_ols,
        r2_ols_classic,
        moran,
        skipped: true,
        spatial: None,
    };
    if moran.pseudo_p > opts.alpha {
        return Ok(base);
    }

    let slx = slx_fit(&x, &y, &w)?;
    let lag = lag_fit_2sls_with(&x, &y, &w, opts.instrument_order, opts.lag_prediction)?;
    let error = error_fit_gmm(&x, &y, &w)?;
    let r2_wx_classic = slx.r2_classic.expect("slx reports classic r2");
    Ok(ScmResult {
        skipped: false,
        spatial: Some(SpatialScms {
            r2_wx: slx.r2_pseudo,
            r2_wx_classic,
            r2_lag: lag.r2_pseudo,
            r2_error: error.r2_pseudo,
            rho: lag.rho.expect("lag fit reports rho"),
            lambda: error.lambda.expect("error fit reports lambda"),
            scm_features: slx.r2_pseudo - r2_ols,
            scm_features_classic: r2_wx_classic - r2_ols_classic,
            scm_targets: lag.r2_pseudo - r2_ols,
            scm_residuals: error.r2_pseudo - r2_ols,
        }),
        ..base
    })
}

/// Correlation of `y` with the fitted values, squared; shared definition for
/// every model's reported fit quality.
pub fn pseudo_r2(y: &[f64], fitted: &[f64]) -> f64 {
    match pearson_corr(y, fitted) {
        Ok(r) => r * r,
        Err(_) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_image, gen_image_folds, GridSpec, SignalKind, SynthSpec};
    use rand::Rng;

    fn spec(seed: u64, signal: SignalKind) -> SynthSpec {
        SynthSpec {
            grid: GridSpec {
                rows: 10,
                cols: 10,
                hole_fraction: 0.0,
            },
            k: 8,
            p: 3,
            beta: vec![1.0, -0.5, 0.8],
            signal,
            noise_sigma: 1.0,
            seed,
        }
    }

    #[test]
    fn filter_keeps_first_of_identical_pair() {
        let mut rng = crate::rng::rng_from_seed(3);
        let mut m = DMatrix::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..20 {
            m[(i, 1)] = m[(i, 0)];
        }
        assert_eq!(filter_collinear(&m, 0.6).unwrap(), vec![0]);
        // At gamma = 1 even a perfect copy stays (|corr| <= 1).
        assert_eq!(filter_collinear(&m, 1.0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn filter_keeps_weakly_correlated_columns() {
        let mut m = DMatrix::zeros(60, 3);
        for i in 0..60 {
            let t = i as f64;
            m[(i, 0)] = t.sin();
            m[(i, 1)] = (2.0 * t).cos();
            m[(i, 2)] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        assert_eq!(filter_collinear(&m, 0.6).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn filter_drops_zero_variance_first() {
        let mut rng = crate::rng::rng_from_seed(4);
        let mut m = DMatrix::from_fn(20, 3, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..20 {
            m[(i, 0)] = 7.0;
        }
        let kept = filter_collinear(&m, 0.9).unwrap();
        assert!(!kept.contains(&0));
        assert!(kept.contains(&1));
    }

    #[test]
    fn filter_rejects_all_constant() {
        let m = DMatrix::from_element(10, 4, 2.5);
        assert!(matches!(
            filter_collinear(&m, 0.6),
            Err(Error::NoUsableFeatures(_))
        ));
    }

    #[test]
    fn target_signal_yields_positive_scm_targets() {
        let img = gen_image(&spec(101, SignalKind::Targets { rho: 0.6 })).unwrap();
        let r = run_image(&img, 0, 8, &ScmOptions::default()).unwrap();
        assert!(!r.skipped);
        let s = r.spatial.unwrap();
        assert!(s.scm_targets > 0.0, "scm_targets = {}", s.scm_targets);
        assert_eq!(s.scm_targets, s.r2_lag - r.r2_ols);
        assert_eq!(s.scm_features, s.r2_wx - r.r2_ols);
        assert_eq!(s.scm_residuals, s.r2_error - r.r2_ols);
    }

    #[test]
    fn classic_features_measure_is_non_negative() {
        for seed in [7, 8, 9] {
            let img = gen_image(&spec(seed, SignalKind::Targets { rho: 0.5 })).unwrap();
            let r = run_image(&img, 0, 8, &ScmOptions::default()).unwrap();
            if let Some(s) = r.spatial {
                assert!(s.scm_features_classic >= -1e-12);
            }
        }
    }

    #[test]
    fn pure_noise_is_skipped() {
        let mut s = spec(202, SignalKind::None);
        s.beta = vec![0.0, 0.0, 0.0];
        let img = gen_image(&s).unwrap();
        let r = run_image(&img, 0, 8, &ScmOptions::default()).unwrap();
        assert!(r.skipped);
        assert!(r.spatial.is_none());
        assert!(r.moran.pseudo_p > 0.05);
    }

    #[test]
    fn gate_consistency_holds_either_way() {
        for seed in 300..310 {
            let img = gen_image(&spec(seed, SignalKind::None)).unwrap();
            let r = run_image(&img, 0, 8, &ScmOptions::default()).unwrap();
            assert_eq!(r.skipped, r.moran.pseudo_p > 0.05);
            assert_eq!(r.skipped, r.spatial.is_none());
        }
    }

    #[test]
    fn run_is_deterministic() {
        let img = gen_image_folds(&spec(404, SignalKind::Targets { rho: 0.5 }), 2).unwrap();
        let opts = ScmOptions::default();
        let a = run_image(&img, 1, 24, &opts).unwrap();
        let b = run_image(&img, 1, 24, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn folds_are_independent_tasks() {
        let img = gen_image_folds(&spec(505, SignalKind::Targets { rho: 0.5 }), 3).unwrap();
        let opts = ScmOptions::default();
        let first_then_last = (
            run_image(&img, 0, 8, &opts).unwrap(),
            run_image(&img, 2, 8, &opts).unwrap(),
        );
        let last_then_first = (
            run_image(&img, 2, 8, &opts).unwrap(),
            run_image(&img, 0, 8, &opts).unwrap(),
        );
        assert_eq!(first_then_last.0, last_then_first.1);
        assert_eq!(first_then_last.1, last_then_first.0);
    }

    #[test]
    fn small_image_tightens_gamma() {
        // 11 regions, 10 columns u_i + u_j over 5 exactly orthogonal base
        // vectors: every pairwise correlation is exactly 0.5 (shared base) or
        // 0 (disjoint), so the full set survives gamma 0.6 and only a
        // tightened gamma below 0.5 thins it out.
        let n = 11usize;
        let mut base = vec![vec![0.0; n]; 5];
        for (b, v) in base.iter_mut().enumerate() {
            v[2 * b] = 1.0;
            v[2 * b + 1] = -1.0;
        }
        let mut pairs = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                pairs.push((i, j));
            }
        }
        let features = DMatrix::from_fn(n, 10, |row, col| {
            let (i, j) = pairs[col];
            base[i][row] + base[j][row]
        });
        let mut rng = crate::rng::rng_from_seed(88);
        let attention = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let img = ImageTensorSet::new(
            "tiny".into(),
            "m".into(),
            GridCoords::full_grid(1, 11).unwrap(),
            features,
            attention,
            ImageClass::Normal,
            Split::Train,
            None,
        )
        .unwrap();
        // Tiny alpha keeps the gate closed; only the filter is under test.
        let opts = ScmOptions {
            alpha: 1e-4,
            ..ScmOptions::default()
        };
        let r = run_image(&img, 0, 8, &opts).unwrap();
        assert!(r.effective_gamma > 0.44 && r.effective_gamma < 0.46);
        assert_eq!(r.retained_columns, vec![0, 7]);
    }

    #[test]
    fn errors_carry_image_context() {
        let img = gen_image(&spec(606, SignalKind::None)).unwrap();
        let err = run_image(&img, 0, 100, &ScmOptions::default()).unwrap_err();
        match err {
            Error::Image {
                image_id, fold, k, ..
            } => {
                assert_eq!(image_id, img.image_id);
                assert_eq!(fold, 0);
                assert_eq!(k, 100);
            }
            other => panic!("expected image context, got {other}"),
        }
    }

    #[test]
    fn tensor_set_validates_shapes() {
        let coords = GridCoords::full_grid(2, 2).unwrap();
        let features = DMatrix::zeros(3, 2);
        let attention = DMatrix::zeros(4, 1);
        assert!(matches!(
            ImageTensorSet::new(
                "x".into(),
                "m".into(),
                coords,
                features,
                attention,
                ImageClass::Normal,
                Split::Train,
                None,
            ),
            Err(Error::DimensionError { .. })
        ));
    }
}
