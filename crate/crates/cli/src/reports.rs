//! Dataset-level analysis tables derived from a results table plus the
//! manifest: aggregates, k sweeps, model rankings with significance
//! matrices, most-spatial image selection, train-versus-test tests,
//! correlation tables, per-image LISA tables, and a JSON summary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use scm_core::analysis::{
    aggregate_scm, pearson_corr, percentile, rank_models, select_most_spatial, tumor_spread,
    welch_ttest_with, ImageMeta, Measure, ModelRanking, MostSpatialReport, ScmAggregate,
};
use scm_core::diagnostics::{lisa, MoranResult, Quadrant};
use scm_core::pipeline::{
    filter_with_tightening, ImageClass, ImageTensorSet, ScmResult, SpatialScms, Split,
};
use scm_core::regression::{ols_fit, DesignMatrix};
use scm_core::rng::task_seed;
use scm_core::weights::SpatialWeights;
use scm_core::Alternative;

use crate::batch::RESULTS_HEADER;
use crate::error::{CliError, Result};
use crate::formats::fmt_f64;
use crate::manifest::DatasetManifest;

/// Parse a results table back into result records. Diagnostic fields the
/// table does not carry (region counts, retained columns, permutation
/// metadata, the classic R-squared variants) are zeroed; none of the
/// dataset-level analyses read them.
pub fn read_results(path: &Path) -> Result<Vec<ScmResult>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Config(format!("cannot open results {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::schema(path, e.to_string()))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != RESULTS_HEADER {
        return Err(CliError::schema(
            path,
            format!("header {got:?} does not match {RESULTS_HEADER:?}"),
        ));
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::schema(path, e.to_string()))?;
        let line = idx + 2;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let real = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| {
                CliError::schema(
                    path,
                    format!(
                        "line {line}: bad {} value {:?}",
                        RESULTS_HEADER[i],
                        field(i)
                    ),
                )
            })
        };
        let integer = |i: usize| -> Result<usize> {
            field(i).parse().map_err(|_| {
                CliError::schema(
                    path,
                    format!(
                        "line {line}: bad {} value {:?}",
                        RESULTS_HEADER[i],
                        field(i)
                    ),
                )
            })
        };
        let skipped = match field(4) {
            "true" => true,
            "false" => false,
            other => {
                return Err(CliError::schema(
                    path,
                    format!("line {line}: bad skipped value {other:?}"),
                ))
            }
        };
        let spatial = if skipped {
            if (8..14).any(|i| !field(i).is_empty()) {
                return Err(CliError::schema(
                    path,
                    format!("line {line}: skipped row carries spatial values"),
                ));
            }
            None
        } else {
            let r2_wx = real(8)?;
            let r2_lag = real(9)?;
            let r2_error = real(10)?;
            Some(SpatialScms {
                r2_wx,
                r2_wx_classic: 0.0,
                r2_lag,
                r2_error,
                rho: 0.0,
                lambda: 0.0,
                scm_features: real(11)?,
                scm_features_classic: 0.0,
                scm_targets: real(12)?,
                scm_residuals: real(13)?,
            })
        };
        out.push(ScmResult {
            image_id: field(0).to_string(),
            model_id: field(1).to_string(),
            fold: integer(2)?,
            k: integer(3)?,
            n_regions: 0,
            retained_columns: Vec::new(),
            effective_gamma: 0.0,
            r2_ols: real(7)?,
            r2_ols_classic: 0.0,
            moran: MoranResult {
                i_statistic: real(5)?,
                expected_i: 0.0,
                pseudo_p: real(6)?,
                n_permutations: 0,
                seed: 0,
            },
            skipped,
            spatial,
        });
    }
    Ok(out)
}

fn measure_of(s: &SpatialScms, measure: Measure) -> f64 {
    match measure {
        Measure::Features => s.scm_features,
        Measure::Targets => s.scm_targets,
        Measure::Residuals => s.scm_residuals,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_record<const N: usize>(
    w: &mut csv::Writer<std::fs::File>,
    record: [String; N],
) -> Result<()> {
    w.write_record(record)
        .map_err(|e| CliError::Config(format!("write failed: {e}")))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_aggregates(path: &Path, aggs: &[ScmAggregate]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(
        &mut w,
        [
            "model_id", "k", "measure", "class", "split", "mean", "max", "min", "count",
        ]
        .map(String::from),
    )?;
    for a in aggs {
        write_record(
            &mut w,
            [
                a.model_id.clone(),
                a.k.to_string(),
                a.measure.to_string(),
                a.class.to_string(),
                a.split.to_string(),
                fmt_f64(a.mean),
                fmt_f64(a.max),
                fmt_f64(a.min),
                a.count.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

/// Mean and max per measure over both splits, one row per (model, class, k):
/// the shape used for neighborhood-size sweep plots.
fn write_ksweep(path: &Path, aggs: &[ScmAggregate]) -> Result<()> {
    let mut pooled: BTreeMap<(String, ImageClass, usize), [Vec<f64>; 3]> = BTreeMap::new();
    for a in aggs {
        let slot = Measure::ALL.iter().position(|&m| m == a.measure).unwrap();
        pooled
            .entry((a.model_id.clone(), a.class, a.k))
            .or_default()[slot]
            .extend_from_slice(&a.values);
    }
    let mut w = csv_writer(path)?;
    write_record(
        &mut w,
        [
            "model_id",
            "class",
            "k",
            "features_mean",
            "features_max",
            "targets_mean",
            "targets_max",
            "residuals_mean",
            "residuals_max",
        ]
        .map(String::from),
    )?;
    for ((model_id, class, k), values) in pooled {
        let stat = |slot: usize| -> (String, String) {
            let v = &values[slot];
            if v.is_empty() {
                return (String::new(), String::new());
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (fmt_f64(mean), fmt_f64(max))
        };
        let (fm, fx) = stat(0);
        let (tm, tx) = stat(1);
        let (rm, rx) = stat(2);
        write_record(
            &mut w,
            [
                model_id,
                class.to_string(),
                k.to_string(),
                fm,
                fx,
                tm,
                tx,
                rm,
                rx,
            ],
        )?;
    }
    finish(w, path)
}

fn write_ranking(dir: &Path, ranking: &ModelRanking) -> Result<(PathBuf, PathBuf)> {
    let table = dir.join(format!("ranking_{}.csv", ranking.measure));
    let mut w = csv_writer(&table)?;
    write_record(
        &mut w,
        ["rank", "model_id", "mean_scm", "count"].map(String::from),
    )?;
    for (idx, m) in ranking.models.iter().enumerate() {
        write_record(
            &mut w,
            [
                (idx + 1).to_string(),
                m.model_id.clone(),
                fmt_f64(m.mean_scm),
                m.count.to_string(),
            ],
        )?;
    }
    finish(w, &table)?;

    let matrix = dir.join(format!("wilcoxon_{}.csv", ranking.measure));
    let mut w = csv_writer(&matrix)?;
    let mut header = vec!["model_id".to_string()];
    header.extend(ranking.models.iter().map(|m| m.model_id.clone()));
    w.write_record(&header)
        .map_err(|e| CliError::Config(format!("write failed: {e}")))?;
    for (i, m) in ranking.models.iter().enumerate() {
        let mut row = vec![m.model_id.clone()];
        row.extend(ranking.wilcoxon_p[i].iter().map(|p| opt(*p)));
        w.write_record(&row)
            .map_err(|e| CliError::Config(format!("write failed: {e}")))?;
    }
    finish(w, &matrix)?;
    Ok((table, matrix))
}

fn write_most_spatial(path: &Path, report: &MostSpatialReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(
        &mut w,
        [
            "image_id",
            "selected_by",
            "n_combinations",
            "k_mean",
            "n_tumor_patches",
            "dist_mean",
        ]
        .map(String::from),
    )?;
    for img in &report.images {
        write_record(
            &mut w,
            [
                img.image_id.clone(),
                img.selected_by.to_string(),
                img.n_combinations.to_string(),
                fmt_f64(img.k_mean),
                img.n_tumor_patches
                    .map(|n| n.to_string())
                    .unwrap_or_default(),
                opt(img.dist_mean),
            ],
        )?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainTestRow {
    pub model_id: String,
    pub k: usize,
    pub measure: Measure,
    pub n_train: usize,
    pub n_test: usize,
    /// One-sided Welch test of train mean greater than test mean; absent
    /// when a side is too small or degenerate.
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p: Option<f64>,
}

/// Train-side and test-side measure values pooled per (model, k, measure).
type SplitSides = BTreeMap<(String, usize, Measure), (Vec<f64>, Vec<f64>)>;

fn compute_train_test(aggs: &[ScmAggregate]) -> Vec<TrainTestRow> {
    let mut sides: SplitSides = BTreeMap::new();
    for a in aggs {
        let entry = sides
            .entry((a.model_id.clone(), a.k, a.measure))
            .or_default();
        match a.split {
            Split::Train => entry.0.extend_from_slice(&a.values),
            Split::Test => entry.1.extend_from_slice(&a.values),
        }
    }
    sides
        .into_iter()
        .map(|((model_id, k, measure), (train, test))| {
            let outcome = welch_ttest_with(&train, &test, Alternative::Greater).ok();
            TrainTestRow {
                model_id,
                k,
                measure,
                n_train: train.len(),
                n_test: test.len(),
                t: outcome.as_ref().map(|o| o.t),
                df: outcome.as_ref().map(|o| o.df),
                p: outcome.as_ref().map(|o| o.p),
            }
        })
        .collect()
}

fn write_train_test(path: &Path, rows: &[TrainTestRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(
        &mut w,
        [
            "model_id", "k", "measure", "n_train", "n_test", "t", "df", "p",
        ]
        .map(String::from),
    )?;
    for r in rows {
        write_record(
            &mut w,
            [
                r.model_id.clone(),
                r.k.to_string(),
                r.measure.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                opt(r.t),
                opt(r.df),
                opt(r.p),
            ],
        )?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationRow {
    pub model_id: String,
    pub k: usize,
    pub measure: Measure,
    /// Tumor images with a mask that contributed a pair.
    pub n: usize,
    /// Pearson correlation of per-image mean measure against the mean
    /// pairwise tumor-patch distance; absent below 3 pairs or when
    /// degenerate.
    pub r: Option<f64>,
}

fn compute_correlations(results: &[ScmResult], meta: &[ImageMeta]) -> Vec<CorrelationRow> {
    let spread: BTreeMap<&str, f64> = meta
        .iter()
        .filter(|m| m.label == ImageClass::Tumor)
        .filter_map(|m| {
            m.tumor_patch_coords
                .as_ref()
                .map(|c| (m.image_id.as_str(), tumor_spread(c)))
        })
        .collect();
    let mut rows = Vec::new();
    for measure in Measure::ALL {
        let mut groups: BTreeMap<(String, usize), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for r in results.iter().filter(|r| !r.skipped) {
            if !spread.contains_key(r.image_id.as_str()) {
                continue;
            }
            let v = measure_of(r.spatial.as_ref().unwrap(), measure);
            groups
                .entry((r.model_id.clone(), r.k))
                .or_default()
                .entry(r.image_id.clone())
                .or_default()
                .push(v);
        }
        for ((model_id, k), per_image) in groups {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (image_id, vals) in &per_image {
                xs.push(spread[image_id.as_str()]);
                ys.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
            rows.push(CorrelationRow {
                model_id,
                k,
                measure,
                n: xs.len(),
                r: pearson_corr(&xs, &ys).ok(),
            });
        }
    }
    rows
}

fn write_correlations(path: &Path, rows: &[CorrelationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(
        &mut w,
        ["model_id", "k", "measure", "n", "r"].map(String::from),
    )?;
    for r in rows {
        write_record(
            &mut w,
            [
                r.model_id.clone(),
                r.k.to_string(),
                r.measure.to_string(),
                r.n.to_string(),
                opt(r.r),
            ],
        )?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, Serialize)]
pub struct LisaTableParams {
    pub fold: usize,
    pub k: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub n_permutations: usize,
    pub master_seed: u64,
}

pub struct LisaRow {
    pub row: u32,
    pub col: u32,
    pub attention: f64,
    /// 1 to 5, boundaries at the 20/40/60/80th percentiles; a value equal
    /// to a boundary falls in the lower bin.
    pub attention_quantile: u8,
    pub residual: f64,
    pub local_i: f64,
    pub quadrant: Quadrant,
    pub p_local: f64,
    pub label: Option<Quadrant>,
}

/// Per-patch local autocorrelation of the filtered OLS residuals, plus the
/// raw attention scores bucketed into quintiles. Seeded like the pipeline,
/// from (master_seed, image_id, fold, k).
pub fn lisa_rows(img: &ImageTensorSet, params: &LisaTableParams) -> Result<Vec<LisaRow>> {
    if params.fold >= img.n_folds() {
        return Err(CliError::Config(format!(
            "fold {} out of range ({} folds)",
            params.fold,
            img.n_folds()
        )));
    }
    let n = img.n_regions();
    let (retained, _) = filter_with_tightening(&img.features, params.gamma, n)?;
    let x = DesignMatrix::from_selected(&img.features, &retained)?;
    let y: Vec<f64> = img.attention.column(params.fold).iter().copied().collect();
    let ols = ols_fit(&x, &y)?;
    let w = SpatialWeights::knn(&img.coords, params.k)?;
    let seed = task_seed(params.master_seed, &img.image_id, params.fold, params.k);
    let local = lisa(
        &ols.residuals,
        &w,
        params.n_permutations,
        seed,
        params.alpha,
    )?;

    let thresholds: Vec<f64> = [20.0, 40.0, 60.0, 80.0]
        .iter()
        .map(|&q| percentile(&y, q))
        .collect::<scm_core::Result<_>>()?;
    Ok((0..n)
        .map(|i| {
            let (row, col) = img.coords.positions()[i];
            LisaRow {
                row,
                col,
                attention: y[i],
                attention_quantile: 1 + thresholds.iter().filter(|&&t| t < y[i]).count() as u8,
                residual: ols.residuals[i],
                local_i: local.local_i[i],
                quadrant: local.quadrant[i],
                p_local: local.pseudo_p_local[i],
                label: local.labels[i],
            }
        })
        .collect())
}

pub fn write_lisa_rows(mut out: impl Write, rows: &[LisaRow]) -> std::io::Result<()> {
    writeln!(
        out,
        "row,col,attention,attention_quantile,residual,local_i,quadrant,p_local,label"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.row,
            r.col,
            fmt_f64(r.attention),
            r.attention_quantile,
            fmt_f64(r.residual),
            fmt_f64(r.local_i),
            r.quadrant,
            fmt_f64(r.p_local),
            r.label
                .map(|q| q.to_string())
                .unwrap_or_else(|| "ns".into()),
        )?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct ReportParams {
    pub results: PathBuf,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Measure driving the most-spatial selection.
    pub measure: Measure,
    pub q: f64,
    pub lisa_images: Vec<String>,
    pub lisa_model: Option<String>,
    pub lisa: LisaTableParams,
}

#[derive(Serialize)]
struct Summary<'a> {
    results_file: String,
    dataset_manifest: String,
    n_rows: usize,
    n_skipped: usize,
    /// Share of rows whose OLS residuals showed significant spatial
    /// autocorrelation (the gate let them through).
    gate_pass_fraction: f64,
    n_aggregate_groups: usize,
    rankings: BTreeMap<String, &'a ModelRanking>,
    most_spatial: &'a MostSpatialReport,
    train_test: &'a [TrainTestRow],
    correlations: &'a [CorrelationRow],
    lisa_tables: &'a [String],
    files: &'a [String],
}

#[derive(Debug)]
pub struct ReportOutcome {
    pub n_rows: usize,
    pub n_files: usize,
    pub summary_path: PathBuf,
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn emit_reports(params: &ReportParams) -> Result<ReportOutcome> {
    if !(0.0..=100.0).contains(&params.q) {
        return Err(CliError::Config(format!(
            "q must lie in [0, 100], got {}",
            params.q
        )));
    }
    std::fs::create_dir_all(&params.out_dir).map_err(|e| CliError::io(&params.out_dir, e))?;
    let results = read_results(&params.results)?;
    if results.is_empty() {
        return Err(CliError::schema(&params.results, "no result rows"));
    }
    let manifest = DatasetManifest::load(&params.dataset)?;
    let meta = manifest.image_meta()?;
    let mismatch = |e: scm_core::Error| CliError::schema(&params.results, e.to_string());

    let mut files: Vec<String> = Vec::new();
    let aggs = aggregate_scm(&results, &meta).map_err(mismatch)?;
    write_aggregates(&params.out_dir.join("aggregates.csv"), &aggs)?;
    files.push("aggregates.csv".into());
    write_ksweep(&params.out_dir.join("ksweep.csv"), &aggs)?;
    files.push("ksweep.csv".into());

    let mut rankings: BTreeMap<String, ModelRanking> = BTreeMap::new();
    for measure in Measure::ALL {
        match rank_models(&results, &meta, measure) {
            Ok(ranking) => {
                let (table, matrix) = write_ranking(&params.out_dir, &ranking)?;
                for p in [table, matrix] {
                    files.push(p.file_name().unwrap().to_string_lossy().into_owned());
                }
                rankings.insert(measure.to_string(), ranking);
            }
            // Nothing to rank (every tumor row skipped, or none exist).
            Err(scm_core::Error::EmptyInput(_)) => {}
            Err(e) => return Err(mismatch(e)),
        }
    }

    let most_spatial =
        select_most_spatial(&results, &meta, params.q, params.measure).map_err(mismatch)?;
    let ms_name = format!("most_spatial_{}.csv", params.measure);
    write_most_spatial(&params.out_dir.join(&ms_name), &most_spatial)?;
    files.push(ms_name);

    let train_test = compute_train_test(&aggs);
    write_train_test(&params.out_dir.join("train_test.csv"), &train_test)?;
    files.push("train_test.csv".into());

    let correlations = compute_correlations(&results, &meta);
    write_correlations(&params.out_dir.join("correlations.csv"), &correlations)?;
    files.push("correlations.csv".into());

    let mut lisa_tables = Vec::new();
    for image_id in &params.lisa_images {
        let row = manifest.find(image_id, params.lisa_model.as_deref())?;
        let img = manifest.load_image(row)?;
        let rows = lisa_rows(&img, &params.lisa)?;
        let name = format!(
            "lisa_{}_f{}_k{}.csv",
            file_safe(image_id),
            params.lisa.fold,
            params.lisa.k
        );
        let path = params.out_dir.join(&name);
        let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_lisa_rows(std::io::BufWriter::new(file), &rows)
            .map_err(|e| CliError::io(&path, e))?;
        lisa_tables.push(name);
    }
    files.extend(lisa_tables.iter().cloned());

    let n_skipped = results.iter().filter(|r| r.skipped).count();
    let summary = Summary {
        results_file: params.results.display().to_string(),
        dataset_manifest: params.dataset.display().to_string(),
        n_rows: results.len(),
        n_skipped,
        gate_pass_fraction: (results.len() - n_skipped) as f64 / results.len() as f64,
        n_aggregate_groups: aggs.len(),
        rankings: rankings.iter().map(|(k, v)| (k.clone(), v)).collect(),
        most_spatial: &most_spatial,
        train_test: &train_test,
        correlations: &correlations,
        lisa_tables: &lisa_tables,
        files: &files,
    };
    let summary_path = params.out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Config(format!("summary serialization failed: {e}")))?;
    std::fs::write(&summary_path, json + "\n").map_err(|e| CliError::io(&summary_path, e))?;

    Ok(ReportOutcome {
        n_rows: results.len(),
        n_files: files.len() + 1,
        summary_path,
    })
}
