//! Run configuration for the `spectree fit` command.
//!
//! A single JSON document holds the sampler settings and the input/output
//! paths. Every field is optional; missing fields take their defaults and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub series: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub demean: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            series: None,
            covariates: None,
            schema: None,
            demean: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// directory containing the file.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        for p in [
            &mut self.data.series,
            &mut self.data.covariates,
            &mut self.data.schema,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        let d = &self.data;
        if d.series.is_none() || d.covariates.is_none() || d.schema.is_none() {
            return Err(Error::Config("data.series, data.covariates and data.schema are required".into()));
        }
        Ok(())
    }
}
