//! Experiment configuration: one JSON file describing the dataset
//! generator, the model, the training recipe, and where runs live.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dssn_core::model::Arch;
use dssn_core::synthdata::SynthSpec;
use dssn_core::trainer::TrainConfig;
use dssn_core::{Error, Result};

/// Environment variable overriding [`ExperimentConfig::runs_dir`].
pub const RUNS_DIR_ENV: &str = "DSSN_RUNS_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Name of the run directory under `runs_dir`.
    pub run_name: String,
    /// Dataset root; `gen-data` writes it, the other commands read it.
    pub dataset_dir: PathBuf,
    /// Parent of all run directories. `DSSN_RUNS_DIR` overrides it.
    pub runs_dir: PathBuf,
    /// Items held out for validation by `gen-data`.
    pub val_count: usize,
    /// Training items that keep their masks; the rest train unlabeled.
    pub labeled_count: usize,
    pub synth: SynthSpec,
    pub arch: Arch,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            dataset_dir: "data".into(),
            runs_dir: "runs".into(),
            val_count: 64,
            labeled_count: 20,
            synth: SynthSpec::with_defaults(4, (64, 64), 264, 0),
            arch: Arch::toy(4),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() {
            return Err(Error::validation("run_name must not be empty"));
        }
        if self.run_name.contains(['/', '\\']) || self.run_name == "." || self.run_name == ".." {
            return Err(Error::validation(format!(
                "run_name {:?} must be a plain directory name",
                self.run_name
            )));
        }
        self.synth.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.arch.num_classes != self.synth.num_classes {
            return Err(Error::validation(format!(
                "arch predicts {} classes but the generator draws {}",
                self.arch.num_classes, self.synth.num_classes
            )));
        }
        if self.val_count == 0 || self.labeled_count == 0 {
            return Err(Error::validation("val_count and labeled_count must be >= 1"));
        }
        if self.val_count + self.labeled_count > self.synth.num_images {
            return Err(Error::validation(format!(
                "val_count {} + labeled_count {} exceeds num_images {}",
                self.val_count, self.labeled_count, self.synth.num_images
            )));
        }
        Ok(())
    }

    /// The directory this configuration's run writes into.
    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.run_name)
    }
}

/// Loads the config file (or defaults when `path` is `None`) and applies
/// the environment and command-line overrides, in that order.
pub fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    run: Option<&str>,
) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p.to_path_buf(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p.to_path_buf(), e))?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(dir) = env::var(RUNS_DIR_ENV) {
        if !dir.is_empty() {
            cfg.runs_dir = PathBuf::from(dir);
        }
    }
    if let Some(s) = seed {
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    if let Some(r) = run {
        cfg.run_name = r.to_string();
    }
    Ok(cfg)
}
