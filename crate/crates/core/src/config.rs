//! Run configuration: one TOML file covering data paths, split, training and
//! evaluation, with command-line overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{TaskKind, DEFAULT_NEGATIVES};
use crate::tabular::SplitFractions;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: missing {0}")]
    Missing(&'static str),
}

/// Serde adapter for enums with `FromStr` and `Display`.
pub(crate) mod via_str {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(with = "via_str")]
    pub task: TaskKind,
    /// Sampled negatives per top-n event.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Ctr,
            negatives: DEFAULT_NEGATIVES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input CSV.
    pub data: Option<PathBuf>,
    /// Schema TOML; defaults to the data path with a `.schema.toml` suffix.
    pub schema: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub split: SplitFractions,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.split
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.train
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn data_path(&self) -> Result<&Path, ConfigError> {
        self.data
            .as_deref()
            .ok_or(ConfigError::Missing("data path (--data)"))
    }

    pub fn schema_path(&self) -> Result<PathBuf, ConfigError> {
        match &self.schema {
            Some(p) => Ok(p.clone()),
            None => Ok(default_schema_path(self.data_path()?)),
        }
    }

    pub fn out_dir(&self) -> Result<&Path, ConfigError> {
        self.out
            .as_deref()
            .ok_or(ConfigError::Missing("output directory (--out)"))
    }
}

/// `data.csv` → `data.schema.toml`.
pub fn default_schema_path(data: &Path) -> PathBuf {
    data.with_extension("schema.toml")
}
