//! Dataset-level statistics over per-image results: class-conditional
//! aggregation, the most-spatial image selection, model ranking, and the
//! supporting scalar statistics.

pub mod stats;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{ImageClass, ScmResult, Split};

pub use stats::{welch_ttest, welch_ttest_with, wilcoxon_signed_rank, TTestResult, WilcoxonResult};

/// Which of the three spatial context measures a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Features,
    Targets,
    Residuals,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Features, Measure::Targets, Measure::Residuals];
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Measure::Features => "features",
            Measure::Targets => "targets",
            Measure::Residuals => "residuals",
        })
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Measure::Features),
            "targets" => Ok(Measure::Targets),
            "residuals" => Ok(Measure::Residuals),
            other => Err(Error::InvalidArgument(format!(
                "unknown measure {other:?}; expected features, targets or residuals"
            ))),
        }
    }
}

/// Per-image metadata the result rows do not carry themselves.
#[derive(Debug, Clone)]
pub struct ImageMeta {
    pub image_id: String,
    pub label: ImageClass,
    pub split: Split,
    pub tumor_patch_coords: Option<Vec<(i64, i64)>>,
}

fn meta_index(meta: &[ImageMeta]) -> HashMap<&str, &ImageMeta> {
    meta.iter().map(|m| (m.image_id.as_str(), m)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a ImageMeta>, image_id: &str) -> Result<&'a ImageMeta> {
    index
        .get(image_id)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("no metadata for image {image_id:?}")))
}

fn measure_value(r: &ScmResult, measure: Measure) -> Option<f64> {
    r.spatial.as_ref().map(|s| match measure {
        Measure::Features => s.scm_features,
        Measure::Targets => s.scm_targets,
        Measure::Residuals => s.scm_residuals,
    })
}

/// One group of concatenated per-image-fold measure values.
#[derive(Debug, Clone, Serialize)]
pub struct ScmAggregate {
    pub model_id: String,
    pub k: usize,
    pub measure: Measure,
    pub class: ImageClass,
    pub split: Split,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub count: usize,
    pub values: Vec<f64>,
}

/// Group non-skipped results by (model, k, measure, class, split) and
/// concatenate fold values. Value order inside a group follows ascending
/// (image_id, fold), so the output is independent of input order.
pub fn aggregate_scm(results: &[ScmResult], meta: &[ImageMeta]) -> Result<Vec<ScmAggregate>> {
    let index = meta_index(meta);
    let mut sorted: Vec<&ScmResult> = results.iter().filter(|r| !r.skipped).collect();
    sorted.sort_by(|a, b| {
        (&a.model_id, &a.image_id, a.fold, a.k).cmp(&(&b.model_id, &b.image_id, b.fold, b.k))
    });

    let mut groups: BTreeMap<(String, usize, Measure, ImageClass, Split), Vec<f64>> =
        BTreeMap::new();
    for r in sorted {
        let m = lookup(&index, &r.image_id)?;
        for measure in Measure::ALL {
            let v = measure_value(r, measure).expect("non-skipped result has spatial fits");
            groups
                .entry((r.model_id.clone(), r.k, measure, m.label, m.split))
                .or_default()
                .push(v);
        }
    }

    Ok(groups
        .into_iter()
        .map(|((model_id, k, measure, class, split), values)| {
            let count = values.len();
            let mean = values.iter().sum::<f64>() / count as f64;
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            ScmAggregate {
                model_id,
                k,
                measure,
                class,
                split,
                mean,
                max,
                min,
                count,
                values,
            }
        })
        .collect())
}

/// Percentile by inclusive linear interpolation: with values sorted
/// ascending, the result interpolates between the order statistics that
/// bracket rank `q/100 * (n-1)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile of empty vector".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "percentile q must lie in [0, 100], got {q}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite value in percentile input".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Mean Euclidean distance over all unordered pairs of patch coordinates,
/// in patch-grid units. Fewer than two patches spread nothing: 0.
pub fn tumor_spread(coords: &[(i64, i64)]) -> f64 {
    if coords.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let dx = (coords[i].0 - coords[j].0) as f64;
            let dy = (coords[i].1 - coords[j].1) as f64;
            total += (dx * dx + dy * dy).sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Sample Pearson correlation coefficient.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionError {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite value in correlation input".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("constant input to correlation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One model-k combination's threshold and selected tumor images.
#[derive(Debug, Clone, Serialize)]
pub struct CombinationSelection {
    pub model_id: String,
    pub k: usize,
    pub threshold: f64,
    pub selected: Vec<String>,
}

/// A tumor image passing the majority rule across combinations.
#[derive(Debug, Clone, Serialize)]
pub struct MostSpatialImage {
    pub image_id: String,
    pub selected_by: usize,
    pub n_combinations: usize,
    /// Arithmetic mean of the k values of the combinations that selected it.
    pub k_mean: f64,
    pub n_tumor_patches: Option<usize>,
    pub dist_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MostSpatialReport {
    pub measure: Measure,
    pub q: f64,
    pub combinations: Vec<CombinationSelection>,
    /// Combinations with no normal-class data, excluded from the majority.
    pub excluded_combinations: Vec<(String, usize)>,
    pub images: Vec<MostSpatialImage>,
}

/// Per model-k combination: average the measure over folds per image, take
/// the `q`th percentile of the normal-class averages as threshold, and select
/// tumor images strictly above it. Globally keep images selected by more than
/// half of the valid combinations.
pub fn select_most_spatial(
    results: &[ScmResult],
    meta: &[ImageMeta],
    q: f64,
    measure: Measure,
) -> Result<MostSpatialReport> {
    let index = meta_index(meta);
    // (model, k) -> image -> fold values
    let mut combos: BTreeMap<(String, usize), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in results.iter().filter(|r| !r.skipped) {
        let v = measure_value(r, measure).expect("non-skipped result has spatial fits");
        combos
            .entry((r.model_id.clone(), r.k))
            .or_default()
            .entry(r.image_id.clone())
            .or_default()
            .push(v);
    }

    let mut combinations = Vec::new();
    let mut excluded = Vec::new();
    let mut tally: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for ((model_id, k), per_image) in combos {
        let mut normal_means = Vec::new();
        let mut tumor_means = Vec::new();
        for (image_id, vals) in &per_image {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            match lookup(&index, image_id)?.label {
                ImageClass::Normal => normal_means.push(mean),
                ImageClass::Tumor => tumor_means.push((image_id.clone(), mean)),
            }
        }
        if normal_means.is_empty() {
            excluded.push((model_id, k));
            continue;
        }
        let threshold = percentile(&normal_means, q)?;
        let selected: Vec<String> = tumor_means
            .into_iter()
            .filter(|(_, mean)| *mean > threshold)
            .map(|(id, _)| id)
            .collect();
        for id in &selected {
            tally.entry(id.clone()).or_default().push(k);
        }
        combinations.push(CombinationSelection {
            model_id,
            k,
            threshold,
            selected,
        });
    }

    let n_combinations = combinations.len();
    let mut images = Vec::new();
    for (image_id, ks) in tally {
        if ks.len() * 2 <= n_combinations {
            continue;
        }
        let m = lookup(&index, &image_id)?;
        let (n_tumor_patches, dist_mean) = match &m.tumor_patch_coords {
            Some(coords) => (Some(coords.len()), Some(tumor_spread(coords))),
            None => (None, None),
        };
        images.push(MostSpatialImage {
            image_id,
            selected_by: ks.len(),
            n_combinations,
            k_mean: ks.iter().sum::<usize>() as f64 / ks.len() as f64,
            n_tumor_patches,
            dist_mean,
        });
    }

    Ok(MostSpatialReport {
        measure,
        q,
        combinations,
        excluded_combinations: excluded,
        images,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RankedModel {
    pub model_id: String,
    pub mean_scm: f64,
    pub count: usize,
}

/// Models ordered by mean measure on tumor-class results, with a pairwise
/// Wilcoxon p-value matrix in ranking order. `None` marks pairs that cannot
/// be tested (no common combinations or all differences zero).
#[derive(Debug, Clone, Serialize)]
pub struct ModelRanking {
    pub measure: Measure,
    pub models: Vec<RankedModel>,
    pub wilcoxon_p: Vec<Vec<Option<f64>>>,
}

/// Rank models by mean measure over tumor-class results. The significance
/// matrix pairs values by (image_id, fold, k), so both models must have fit
/// the same combination for it to count.
pub fn rank_models(
    results: &[ScmResult],
    meta: &[ImageMeta],
    measure: Measure,
) -> Result<ModelRanking> {
    let index = meta_index(meta);
    let mut per_model: BTreeMap<String, BTreeMap<(String, usize, usize), f64>> = BTreeMap::new();
    for r in results.iter().filter(|r| !r.skipped) {
        if lookup(&index, &r.image_id)?.label != ImageClass::Tumor {
            continue;
        }
        let v = measure_value(r, measure).expect("non-skipped result has spatial fits");
        per_model
            .entry(r.model_id.clone())
            .or_default()
            .insert((r.image_id.clone(), r.fold, r.k), v);
    }
    if per_model.is_empty() {
        return Err(Error::EmptyInput(
            "no tumor-class results available for ranking".into(),
        ));
    }

    let mut models: Vec<RankedModel> = per_model
        .iter()
        .map(|(id, vals)| RankedModel {
            model_id: id.clone(),
            mean_scm: vals.values().sum::<f64>() / vals.len() as f64,
            count: vals.len(),
        })
        .collect();
    models.sort_by(|a, b| {
        b.mean_scm
            .partial_cmp(&a.mean_scm)
            .unwrap()
            .then_with(|| a.model_id.cmp(&b.model_id))
    });

    let m = models.len();
    let mut matrix = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let a = &per_model[&models[i].model_id];
            let b = &per_model[&models[j].model_id];
            let keys: BTreeSet<_> = a.keys().filter(|key| b.contains_key(*key)).collect();
            let av: Vec<f64> = keys.iter().map(|key| a[*key]).collect();
            let bv: Vec<f64> = keys.iter().map(|key| b[*key]).collect();
            let p = wilcoxon_signed_rank(&av, &bv).ok().map(|r| r.p);
            matrix[i][j] = p;
            matrix[j][i] = p;
        }
    }

    Ok(ModelRanking {
        measure,
        models,
        wilcoxon_p: matrix,
    })
}
