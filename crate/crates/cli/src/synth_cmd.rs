//! Synthetic dataset emission: a TOML recipe expands into per-image tensor
//! files plus a manifest, ready for `run`.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Deserialize;

use scm_core::pipeline::ImageClass;
use scm_core::rng::{derive_seed, rng_from_seed, task_seed};
use scm_core::synth::{gen_grid, gen_image_folds_on, GridSpec, SignalKind, SynthSpec};

use crate::error::{CliError, Result};
use crate::formats;
use crate::manifest::{DatasetManifest, ManifestRow};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub master_seed: u64,
    pub folds: usize,
    pub models: Vec<String>,
    /// Fraction of each group assigned to the test split, spread evenly.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub grid: GridSpec,
    pub features: FeatureParams,
    pub groups: Vec<GroupSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureParams {
    /// Neighborhood size of the generating weights.
    pub k: usize,
    pub p: usize,
    pub beta: Vec<f64>,
    pub noise_sigma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub label: ImageClass,
    pub count: usize,
    pub signal: SignalKind,
}

fn default_test_fraction() -> f64 {
    0.5
}

const MASK_TAG: u64 = 0x6d61_736b;

fn path_safe(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl DatasetSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let spec: DatasetSpec = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad dataset spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(CliError::Config("folds must be positive".into()));
        }
        if self.models.is_empty() {
            return Err(CliError::Config("at least one model id is required".into()));
        }
        for m in &self.models {
            if !path_safe(m) {
                return Err(CliError::Config(format!(
                    "model id {m:?} must use only alphanumerics, '-', '_' or '.'"
                )));
            }
        }
        let mut unique = self.models.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != self.models.len() {
            return Err(CliError::Config("model ids must be unique".into()));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(CliError::Config(format!(
                "test_fraction must lie in [0, 1], got {}",
                self.test_fraction
            )));
        }
        if self.groups.is_empty() {
            return Err(CliError::Config(
                "at least one image group is required".into(),
            ));
        }
        for (idx, g) in self.groups.iter().enumerate() {
            if g.count == 0 {
                return Err(CliError::Config(format!("group {idx} has zero images")));
            }
            // The template validation covers grid, k, p, beta and signal.
            self.template(g.signal, 0)
                .validate()
                .map_err(|e| CliError::Config(format!("group {idx}: {e}")))?;
        }
        Ok(())
    }

    fn template(&self, signal: SignalKind, seed: u64) -> SynthSpec {
        SynthSpec {
            grid: self.grid,
            k: self.features.k,
            p: self.features.p,
            beta: self.features.beta.clone(),
            signal,
            noise_sigma: self.features.noise_sigma,
            seed,
        }
    }
}

/// Even Bresenham-style spread: item `i` of a group lands in the test split
/// exactly when the running total of `fraction` crosses an integer.
fn is_test(i: usize, fraction: f64) -> bool {
    ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor()
}

/// The `size` surviving patches closest to a randomly picked center; ties
/// break on patch index. Emulates a compact lesion on the patch grid.
fn tumor_mask(positions: &[(u32, u32)], seed: u64, size: usize) -> Vec<(u32, u32)> {
    let mut rng = rng_from_seed(derive_seed(seed, MASK_TAG));
    let center = positions[rng.random_range(0..positions.len())];
    let mut order: Vec<(u64, usize)> = positions
        .iter()
        .enumerate()
        .map(|(idx, &(r, c))| {
            let dr = r as i64 - center.0 as i64;
            let dc = c as i64 - center.1 as i64;
            ((dr * dr + dc * dc) as u64, idx)
        })
        .collect();
    order.sort_unstable();
    order[..size.min(positions.len())]
        .iter()
        .map(|&(_, idx)| positions[idx])
        .collect()
}

#[derive(Debug)]
pub struct SynthSummary {
    pub n_images: usize,
    pub n_rows: usize,
    pub manifest_path: PathBuf,
}

pub fn generate(spec: &DatasetSpec, out_dir: &Path, binary_features: bool) -> Result<SynthSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut rows: Vec<ManifestRow> = Vec::new();
    let mut n_images = 0usize;
    for group in &spec.groups {
        for i in 0..group.count {
            let image_id = format!("{}-{:03}", group.label, i);
            let image_seed = task_seed(spec.master_seed, &image_id, 0, 0);
            let grid_template = spec.template(group.signal, image_seed);
            let coords = gen_grid(&grid_template)?;
            let split = if is_test(i, spec.test_fraction) {
                scm_core::pipeline::Split::Test
            } else {
                scm_core::pipeline::Split::Train
            };

            let rel_dir = PathBuf::from("images").join(&image_id);
            let abs_dir = out_dir.join(&rel_dir);
            std::fs::create_dir_all(&abs_dir).map_err(|e| CliError::io(&abs_dir, e))?;
            let rel_coords = rel_dir.join("coords.csv");
            formats::write_coords(&out_dir.join(&rel_coords), coords.positions())?;

            let rel_mask = match group.label {
                ImageClass::Tumor => {
                    let size = (coords.len() / 10).max(2);
                    let mask = tumor_mask(coords.positions(), image_seed, size);
                    let rel = rel_dir.join("tumor_mask.csv");
                    formats::write_coords(&out_dir.join(&rel), &mask)?;
                    Some(rel)
                }
                ImageClass::Normal => None,
            };

            for model in &spec.models {
                let pair_seed = task_seed(image_seed, model, 0, 0);
                let model_spec = SynthSpec {
                    seed: pair_seed,
                    ..grid_template.clone()
                };
                let img = gen_image_folds_on(&model_spec, coords.clone(), spec.folds)?;
                let model_dir = rel_dir.join(model);
                std::fs::create_dir_all(out_dir.join(&model_dir))
                    .map_err(|e| CliError::io(out_dir.join(&model_dir), e))?;
                let rel_features = model_dir.join(if binary_features {
                    "features.bin"
                } else {
                    "features.csv"
                });
                if binary_features {
                    formats::write_features_bin(&out_dir.join(&rel_features), &img.features)?;
                } else {
                    formats::write_matrix(&out_dir.join(&rel_features), &img.features, "f")?;
                }
                let rel_attention = model_dir.join("attention.csv");
                formats::write_matrix(&out_dir.join(&rel_attention), &img.attention, "fold")?;

                let to_rel = |p: &Path| p.to_string_lossy().into_owned();
                rows.push(ManifestRow {
                    image_id: image_id.clone(),
                    model_id: model.clone(),
                    label: group.label,
                    split,
                    folds: spec.folds,
                    coords: to_rel(&rel_coords),
                    features: to_rel(&rel_features),
                    attention: to_rel(&rel_attention),
                    tumor_mask: rel_mask.as_deref().map(to_rel),
                });
            }
            n_images += 1;
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    let n_rows = rows.len();
    DatasetManifest::save(&manifest_path, &rows)?;
    Ok(SynthSummary {
        n_images,
        n_rows,
        manifest_path,
    })
}
