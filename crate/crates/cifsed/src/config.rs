//! Experiment configuration files (TOML or JSON).

use std::path::{Path, PathBuf};

use cifsed_core::corpus::{generate_synthetic, Dataset, SyntheticConfig};
use cifsed_core::harness::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::persist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        config: SyntheticConfig,
        #[serde(default)]
        seed: u64,
    },
    Jsonl {
        path: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            config: SyntheticConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Seed of the train/test instance split.
    pub partition_seed: u64,
    /// Prompt template resource overriding `run.templates`.
    pub templates: Option<PathBuf>,
    pub run: RunConfig,
}

/// Loaded data, already split for training and evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::format(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, e))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Jsonl { path } = &mut self.data {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(t) = &mut self.templates {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short digest of the canonical JSON form, used to name run directories.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let dataset = match &self.data {
            DataSource::Synthetic { config, seed } => generate_synthetic(config, *seed)?,
            DataSource::Jsonl { path } => crate::data::load_dataset(path)?,
        };
        let mut run = self.run.clone();
        if let Some(path) = &self.templates {
            run.templates = persist::load_templates(path)?;
        }
        run.validate()?;
        let (train, test) = dataset.partition(run.test_fraction, self.partition_seed)?;
        Ok(Prepared { train, test, run })
    }
}
