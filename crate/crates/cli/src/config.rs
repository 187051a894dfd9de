use std::path::Path;

use serde::{Deserialize, Serialize};

use ear_core::backend::BlobWorldConfig;
use ear_core::pipeline::PipelineConfig;

use crate::CliError;

/// Everything a config file can set. Missing fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BlobWorldConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), CliError> {
        self.backend.validate().map_err(CliError::Config)?;
        self.pipeline.validate().map_err(CliError::Config)?;
        if self.backend.steps != self.pipeline.steps {
            return Err(CliError::Config(format!(
                "backend.steps {} differs from pipeline.steps {}",
                self.backend.steps, self.pipeline.steps
            )));
        }
        Ok(())
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
