//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, TrainConfig};
use crate::global_fit::GlobalFitConfig;
use crate::local_fit::LocalFitConfig;
use crate::metrics::MetricsConfig;

/// Environment variable that overrides `threads`.
pub const THREADS_ENV: &str = "GCHOREO_THREADS";

/// The audio pipeline has fixed parameters; the block exists so that a
/// config file can carry it and unknown keys are still rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub local_fit: LocalFitConfig,
    pub global_fit: GlobalFitConfig,
    /// Architecture; when absent, training uses the 1/32-width profile
    /// sized to the data's feature width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub features: FeaturesConfig,
    pub seed: u64,
    /// Worker thread cap; 0 means one per core.
    pub threads: usize,
}

impl RunConfig {
    /// Parses and validates; errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.local_fit.validate("local_fit")?;
        self.global_fit.validate("global_fit")?;
        if let Some(g) = &self.generator {
            g.validate("generator")?;
        }
        self.train.validate("train")?;
        self.metrics.validate("metrics")
    }

    /// Thread cap after applying the environment override.
    pub fn effective_threads(&self) -> Result<usize> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => parse_threads(&v),
            Err(_) => Ok(self.threads),
        }
    }
}

fn parse_threads(v: &str) -> Result<usize> {
    v.trim().parse::<usize>().map_err(|_| Error::Config {
        path: THREADS_ENV.into(),
        message: format!("expected a non-negative integer, got `{v}`"),
    })
}
