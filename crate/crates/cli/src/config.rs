//! Run configuration (TOML). Every section and key is optional; unknown keys
//! are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use gpboost_core::boost::BoostConfig;
use gpboost_core::experiment::ExperimentConfig;
use gpboost_core::vecchia::Ordering;
use gpboost_core::Kernel;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness. When set it overrides the early-stopping
    /// seed, the Vecchia ordering seed and the simulation seed.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub random_effects: Vec<RandomEffectSpec>,
    pub boost: BoostConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Response column.
    pub response: String,
    /// Predictor columns; empty means every column not used elsewhere.
    pub predictors: Vec<String>,
    /// Predictor columns with string levels, dummy-coded against the training
    /// levels (unseen levels map to all zeros).
    pub categorical: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            response: "y".into(),
            predictors: Vec::new(),
            categorical: Vec::new(),
        }
    }
}

/// How one random-effects component is read from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum RandomEffectSpec {
    /// Grouped intercept (or slope on `slope`) for the labels in `column`.
    Grouped {
        column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slope: Option<String>,
    },
    /// Gaussian process over the coordinate columns.
    Gp {
        coordinates: Vec<String>,
        #[serde(default = "default_kernel")]
        kernel: Kernel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slope: Option<String>,
    },
}

fn default_kernel() -> Kernel {
    Kernel::Exponential
}

impl RandomEffectSpec {
    pub fn columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = match self {
            RandomEffectSpec::Grouped { column, .. } => vec![column.as_str()],
            RandomEffectSpec::Gp { coordinates, .. } => coordinates.iter().map(String::as_str).collect(),
        };
        let slope = match self {
            RandomEffectSpec::Grouped { slope, .. } | RandomEffectSpec::Gp { slope, .. } => slope,
        };
        if let Some(s) = slope {
            out.push(s);
        }
        out
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            if let Some(es) = &mut self.boost.early_stopping {
                es.seed = seed;
            }
            if let Some(v) = &mut self.boost.vecchia {
                if let Ordering::RandomPermutation(_) = v.ordering {
                    v.ordering = Ordering::RandomPermutation(seed);
                }
            }
            self.experiment.design.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.boost.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.data.response.is_empty() {
            return Err(CliError::Usage("data.response must name a column".into()));
        }
        for re in &self.random_effects {
            if let RandomEffectSpec::Gp { coordinates, .. } = re {
                if coordinates.is_empty() {
                    return Err(CliError::Usage("a gp component needs at least one coordinate column".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
