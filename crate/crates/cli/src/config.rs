//! Batch run parameters assembled from flags, with defaults matching the
//! standard configuration.

use std::path::PathBuf;

use scm_core::pipeline::ScmOptions;
use scm_core::regression::LagPrediction;
use scm_core::Alternative;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub k_list: Vec<usize>,
    pub n_permutations: usize,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
    pub instrument_order: usize,
    pub alternative: Alternative,
    pub prediction: LagPrediction,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CliError::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.k_list.is_empty() {
            return Err(CliError::Config("k list must not be empty".into()));
        }
        if self.k_list.contains(&0) {
            return Err(CliError::Config("every k must be positive".into()));
        }
        if self.n_permutations < 99 {
            return Err(CliError::Config(format!(
                "need at least 99 permutations, got {}",
                self.n_permutations
            )));
        }
        if self.instrument_order == 0 {
            return Err(CliError::Config("instrument order must be positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be positive".into()));
        }
        Ok(())
    }

    pub fn scm_options(&self) -> ScmOptions {
        ScmOptions {
            gamma: self.gamma,
            alpha: self.alpha,
            n_permutations: self.n_permutations,
            master_seed: self.master_seed,
            instrument_order: self.instrument_order,
            moran_alternative: self.alternative,
            lag_prediction: self.prediction,
        }
    }
}

pub fn parse_alternative(s: &str) -> Result<Alternative> {
    match s {
        "greater" => Ok(Alternative::Greater),
        "two_sided" => Ok(Alternative::TwoSided),
        other => Err(CliError::Config(format!(
            "unknown alternative {other:?}; expected greater or two_sided"
        ))),
    }
}

pub fn parse_prediction(s: &str) -> Result<LagPrediction> {
    match s {
        "structural" => Ok(LagPrediction::Structural),
        "reduced_form" => Ok(LagPrediction::ReducedForm),
        other => Err(CliError::Config(format!(
            "unknown prediction {other:?}; expected structural or reduced_form"
        ))),
    }
}

pub fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad k value {part:?}")))
        })
        .collect()
}
