//! The run config: one declarative file covering model, training, loss,
//! and label settings plus the data/output paths, with command-line
//! overrides applied on top. Validation happens on the merged result and
//! reports every problem at once.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crowdcount_core::densitymap::LabelSpec;
use crowdcount_core::losses::LossConfig;
use crowdcount_core::model::ModelConfig;
use crowdcount_core::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory of `.ppm` images with `.json` annotation sidecars.
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, logs, and the echoed config.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub label: LabelSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            label: LabelSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML run config. Every section is optional; missing keys
    /// take the library defaults.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e)))?;
        toml::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e)))
    }

    /// Collects every validation issue across the merged sections.
    pub fn issues(&self) -> Vec<String> {
        let mut out = self.model.issues();
        out.extend(self.train.issues());
        out.extend(self.loss.issues());
        out.extend(self.label.issues());
        out
    }

    /// Fails with the full issue list when anything is invalid.
    pub fn validate(&self) -> Result<(), CliError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!(
                "invalid configuration:\n  {}",
                issues.join("\n  ")
            )))
        }
    }

    /// Writes the merged, post-override config into the output directory so
    /// every artifact records exactly what produced it.
    pub fn echo_into(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("{}: {}", dir.display(), e)))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("config serialization: {}", e)))?;
        let path = dir.join("effective-config.toml");
        fs::write(&path, text)
            .map_err(|e| CliError::runtime(format!("{}: {}", path.display(), e)))?;
        Ok(())
    }
}

