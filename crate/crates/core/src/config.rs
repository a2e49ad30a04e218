//! TOML run configuration for cross-validation experiments.
//!
//! ```toml
//! manifest = "data/manifest.json"   # relative paths resolve against this file
//! store = "data/embeddings.emb"
//! output_dir = "out"
//! setting = "binary"                # or "likert5"
//! k = 5
//! seed = 0
//! aggregation = "pooled"            # or "fold_averaged"
//! jobs = 1
//!
//! [model]
//! d_model = 32
//!
//! [train]
//! epochs = 100
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Setting;
use crate::eval::{Aggregation, CvOptions};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn default_k() -> usize {
    5
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub store: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_setting")]
    pub setting: Setting,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Also write each fold's final weights to `output_dir/checkpoints`.
    #[serde(default)]
    pub save_checkpoints: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_setting() -> Setting {
    Setting::Likert5
}

/// Fields that determine the numbers in a report. Paths and `jobs` are
/// excluded so that moving data or changing parallelism keeps the hash.
#[derive(Serialize)]
struct HashedFields<'a> {
    setting: Setting,
    k: usize,
    seed: u64,
    aggregation: Aggregation,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid {
            path: path.to_path_buf(),
            message,
        };
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.store, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate().map_err(invalid)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k < 2 {
            return Err(format!("k: need at least 2 folds, got {}", self.k));
        }
        if self.jobs == 0 {
            return Err("jobs: must be at least 1".into());
        }
        self.effective_model()
            .validate()
            .map_err(|e| format!("model: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))
    }

    /// Model configuration with the class count implied by `setting`.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            n_classes: self.setting.n_classes(),
            ..self.model.clone()
        }
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            k: self.k,
            seed: self.seed,
            setting: self.setting,
            aggregation: self.aggregation,
            train: self.train.clone(),
            jobs: self.jobs,
        }
    }

    /// SHA-256 (hex) of the canonical JSON of every result-determining field.
    pub fn config_hash(&self) -> String {
        let model = self.effective_model();
        let fields = HashedFields {
            setting: self.setting,
            k: self.k,
            seed: self.seed,
            aggregation: self.aggregation,
            model: &model,
            train: &self.train,
        };
        let json = serde_json::to_vec(&fields).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
