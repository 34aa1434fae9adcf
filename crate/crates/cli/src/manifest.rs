//! Dataset manifest: one CSV row per (image, model) pair naming the tensor
//! files, with label, split and fold count. Paths are relative to the
//! manifest's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use scm_core::analysis::ImageMeta;
use scm_core::pipeline::{ImageClass, ImageTensorSet, Split};
use scm_core::weights::GridCoords;

use crate::error::{CliError, Result};
use crate::formats;

pub const MANIFEST_HEADER: [&str; 9] = [
    "image_id",
    "model_id",
    "label",
    "split",
    "folds",
    "coords",
    "features",
    "attention",
    "tumor_mask",
];

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub image_id: String,
    pub model_id: String,
    pub label: ImageClass,
    pub split: Split,
    pub folds: usize,
    pub coords: String,
    pub features: String,
    pub attention: String,
    /// Empty manifest cell reads as absent.
    pub tumor_mask: Option<String>,
}

#[derive(Debug)]
pub struct DatasetManifest {
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
    pub path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| {
            CliError::Config(format!("cannot open manifest {}: {e}", path.display()))
        })?;
        let headers = reader
            .headers()
            .map_err(|e| CliError::schema(path, e.to_string()))?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_HEADER {
            return Err(CliError::schema(
                path,
                format!("header {got:?} does not match {MANIFEST_HEADER:?}"),
            ));
        }

        let mut rows = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record.map_err(|e| CliError::schema(path, e.to_string()))?;
            let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
            let line = idx + 2;
            let label: ImageClass = field(2)
                .parse()
                .map_err(|e| CliError::schema(path, format!("line {line}: {e}")))?;
            let split: Split = field(3)
                .parse()
                .map_err(|e| CliError::schema(path, format!("line {line}: {e}")))?;
            let folds: usize = field(4).parse().map_err(|_| {
                CliError::schema(path, format!("line {line}: bad fold count {:?}", field(4)))
            })?;
            if folds == 0 {
                return Err(CliError::schema(
                    path,
                    format!("line {line}: folds must be positive"),
                ));
            }
            let mask = field(8);
            rows.push(ManifestRow {
                image_id: field(0),
                model_id: field(1),
                label,
                split,
                folds,
                coords: field(5),
                features: field(6),
                attention: field(7),
                tumor_mask: if mask.is_empty() { None } else { Some(mask) },
            });
        }
        if rows.is_empty() {
            return Err(CliError::schema(path, "manifest lists no images"));
        }

        let manifest = DatasetManifest {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path: path.to_path_buf(),
            rows,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
        let mut image_attrs: HashMap<&str, (ImageClass, Split)> = HashMap::new();
        for (idx, row) in self.rows.iter().enumerate() {
            let key = (row.image_id.as_str(), row.model_id.as_str());
            if let Some(first) = seen.insert(key, idx) {
                return Err(CliError::schema(
                    &self.path,
                    format!(
                        "image {:?} model {:?} appears on lines {} and {}",
                        row.image_id,
                        row.model_id,
                        first + 2,
                        idx + 2
                    ),
                ));
            }
            match image_attrs.insert(&row.image_id, (row.label, row.split)) {
                Some(prev) if prev != (row.label, row.split) => {
                    return Err(CliError::schema(
                        &self.path,
                        format!(
                            "image {:?} has conflicting label or split across rows",
                            row.image_id
                        ),
                    ));
                }
                _ => {}
            }
            for rel in [&row.coords, &row.features, &row.attention]
                .into_iter()
                .chain(row.tumor_mask.as_ref())
            {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(CliError::schema(
                        &self.path,
                        format!("referenced file {} does not exist", p.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn find(&self, image_id: &str, model_id: Option<&str>) -> Result<&ManifestRow> {
        let mut candidates = self
            .rows
            .iter()
            .filter(|r| r.image_id == image_id && model_id.is_none_or(|m| r.model_id == m));
        match (candidates.next(), candidates.next()) {
            (Some(row), None) => Ok(row),
            (Some(_), Some(_)) => Err(CliError::Config(format!(
                "image {image_id:?} has several models; pass --model"
            ))),
            (None, _) => Err(CliError::Config(format!(
                "image {image_id:?} not found in the manifest"
            ))),
        }
    }

    pub fn load_image(&self, row: &ManifestRow) -> Result<ImageTensorSet> {
        let coords_path = self.resolve(&row.coords);
        let positions = formats::read_coords(&coords_path)?;
        let n = positions.len();
        let coords = GridCoords::new(positions)
            .map_err(|e| CliError::schema(&coords_path, e.to_string()))?;

        let features_path = self.resolve(&row.features);
        let features = formats::read_features(&features_path)?;
        if features.nrows() != n {
            return Err(CliError::schema(
                &features_path,
                format!(
                    "{} feature rows but the coords file lists {n} patches",
                    features.nrows()
                ),
            ));
        }

        let attention_path = self.resolve(&row.attention);
        let attention = formats::read_matrix(&attention_path)?;
        if attention.nrows() != n {
            return Err(CliError::schema(
                &attention_path,
                format!(
                    "{} attention rows but the coords file lists {n} patches",
                    attention.nrows()
                ),
            ));
        }
        if attention.ncols() != row.folds {
            return Err(CliError::schema(
                &attention_path,
                format!(
                    "{} attention columns but the manifest declares {} folds",
                    attention.ncols(),
                    row.folds
                ),
            ));
        }

        let tumor = match &row.tumor_mask {
            Some(rel) => Some(
                formats::read_coords(&self.resolve(rel))?
                    .into_iter()
                    .map(|(r, c)| (r as i64, c as i64))
                    .collect(),
            ),
            None => None,
        };

        ImageTensorSet::new(
            row.image_id.clone(),
            row.model_id.clone(),
            coords,
            features,
            attention,
            row.label,
            row.split,
            tumor,
        )
        .map_err(CliError::Core)
    }

    /// One metadata record per distinct image, for the dataset-level
    /// analyses. Masks load lazily here, once per image.
    pub fn image_meta(&self) -> Result<Vec<ImageMeta>> {
        let mut out: Vec<ImageMeta> = Vec::new();
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for row in &self.rows {
            if seen.insert(&row.image_id, ()).is_some() {
                continue;
            }
            let tumor_patch_coords = match &row.tumor_mask {
                Some(rel) => Some(
                    formats::read_coords(&self.resolve(rel))?
                        .into_iter()
                        .map(|(r, c)| (r as i64, c as i64))
                        .collect(),
                ),
                None => None,
            };
            out.push(ImageMeta {
                image_id: row.image_id.clone(),
                label: row.label,
                split: row.split,
                tumor_patch_coords,
            });
        }
        Ok(out)
    }

    pub fn save(path: &Path, rows: &[ManifestRow]) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| {
            CliError::Config(format!("cannot write manifest {}: {e}", path.display()))
        })?;
        writer
            .write_record(MANIFEST_HEADER)
            .map_err(|e| CliError::Config(e.to_string()))?;
        for row in rows {
            writer
                .write_record([
                    row.image_id.as_str(),
                    row.model_id.as_str(),
                    &row.label.to_string(),
                    &row.split.to_string(),
                    &row.folds.to_string(),
                    &row.coords,
                    &row.features,
                    &row.attention,
                    row.tumor_mask.as_deref().unwrap_or(""),
                ])
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        writer.flush().map_err(|e| CliError::io(path, e))
    }
}
