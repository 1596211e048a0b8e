//! Self-contained JSON model file.

use serde::{Deserialize, Serialize};
use std::path::Path;

use gpboost_core::boost::FittedModel;

use crate::data::Schema;
use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the configuration text.
    pub config_sha256: String,
    /// SHA-256 of the training CSV bytes.
    pub data_sha256: String,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub schema: Schema,
    pub provenance: Provenance,
    /// Ensemble, covariance parameters, training design and residual.
    pub model: FittedModel,
}

impl ModelFile {
    pub fn new(schema: Schema, provenance: Provenance, model: FittedModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            schema,
            provenance,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(format!("cannot serialize model: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Data(format!("model file is not valid JSON: {e}")))?;
        match v.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(ver) if ver == u64::from(FORMAT_VERSION) => {}
            Some(ver) => {
                return Err(CliError::Data(format!(
                    "unsupported model format version {ver} (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(CliError::Data("model file has no format_version".into())),
        }
        serde_json::from_value(v).map_err(|e| CliError::Data(format!("invalid model file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read model {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
