//! Multi-task denoising corpus: ingestion, capping and mixing, leakage
//! filtering, rendering and sharding.

mod build;
mod ingest;
mod leakage;
mod mix;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::{BudgetConfig, DenoiseError};
use crate::record::{RecordError, TaskSchema};

pub use build::{build_corpus, build_demo_index, CorpusManifest, ShardInfo, TaskCounts};
pub use ingest::{ingest, Ingest};
pub use leakage::{normalize_text, LeakageFilter};
pub use mix::{apply_cap_and_mix, cap_indices, MixPlan};

pub const DEFAULT_CAP: usize = 300_000;
pub const DEFAULT_SHARD_SIZE: usize = 10_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {source}")]
    Schema {
        path: PathBuf,
        line: usize,
        source: RecordError,
    },
    #[error("{path}: declared {declared} records, found {found}")]
    SizeMismatch {
        path: PathBuf,
        declared: usize,
        found: usize,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("no source has any records")]
    NoRecords,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A schema given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaRef {
    Inline(TaskSchema),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub schema: TaskSchema,
    pub declared_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub path: PathBuf,
    pub schema: SchemaRef,
    pub declared_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LeakageConfig {
    pub enabled: bool,
    pub forbidden_values: Vec<String>,
    /// JSONL record files whose values are all forbidden, e.g. evaluation sets.
    pub forbidden_files: Vec<PathBuf>,
}

fn default_cap() -> Option<usize> {
    Some(DEFAULT_CAP)
}

fn default_shard_size() -> usize {
    DEFAULT_SHARD_SIZE
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// `null` means no cap.
    #[serde(default = "default_cap")]
    pub cap_per_dataset: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
    #[serde(default)]
    pub budget: BudgetConfig,
    /// Interleaving weight is `remaining^(1/temperature)`; 1 is exactly proportional.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            cap_per_dataset: default_cap(),
            seed: 0,
            shard_size: DEFAULT_SHARD_SIZE,
            budget: BudgetConfig::default(),
            temperature: 1.0,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.cap_per_dataset == Some(0) {
            return Err(CorpusError::Config("cap_per_dataset must be positive".into()));
        }
        if self.shard_size == 0 {
            return Err(CorpusError::Config("shard_size must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CorpusError::Config("temperature must be positive".into()));
        }
        crate::denoise::TokenBudget::try_from(&self.budget)?;
        Ok(())
    }
}

/// The JSON file read by `build-corpus`. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub sources: Vec<SourceConfig>,
    #[serde(flatten)]
    pub mixture: MixtureConfig,
    #[serde(default)]
    pub leakage: LeakageConfig,
}

/// Config with paths and schemas resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub raw: CorpusConfig,
    pub sources: Vec<DatasetSource>,
    pub mixture: MixtureConfig,
    pub leakage: LeakageFilter,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}

impl CorpusConfig {
    pub fn load(path: &Path) -> Result<ResolvedConfig, CorpusError> {
        let text = read(path)?;
        let raw: CorpusConfig =
            serde_json::from_str(&text).map_err(|e| CorpusError::Config(format!("{}: {e}", path.display())))?;
        raw.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(self, base: &Path) -> Result<ResolvedConfig, CorpusError> {
        self.mixture.validate()?;
        if self.sources.is_empty() {
            return Err(CorpusError::Config("no sources".into()));
        }
        let mut sources = Vec::new();
        for s in &self.sources {
            let schema = match &s.schema {
                SchemaRef::Inline(schema) => schema.clone(),
                SchemaRef::Path(p) => {
                    let p = base.join(p);
                    serde_json::from_str(&read(&p)?)
                        .map_err(|e| CorpusError::Config(format!("{}: {e}", p.display())))?
                }
            };
            schema
                .validate()
                .map_err(|e| CorpusError::Config(format!("schema {}: {e}", schema.task)))?;
            sources.push(DatasetSource {
                path: base.join(&s.path),
                schema,
                declared_size: s.declared_size,
            });
        }
        let mut forbidden = self.leakage.forbidden_values.clone();
        for f in &self.leakage.forbidden_files {
            forbidden.extend(leakage::values_in_file(&base.join(f))?);
        }
        let leakage = if self.leakage.enabled {
            LeakageFilter::new(&forbidden)?
        } else {
            LeakageFilter::disabled()
        };
        Ok(ResolvedConfig {
            mixture: self.mixture.clone(),
            raw: self,
            sources,
            leakage,
        })
    }
}
