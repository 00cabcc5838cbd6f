//! Run configuration: one TOML file covering paths, schedule, model, and
//! training knobs. Unknown keys are rejected; paths may be overridden from
//! the environment.

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA: u32 = 1;

pub const ENV_SPACE_FILE: &str = "RAWGLOW_SPACE_FILE";
pub const ENV_DATA_DIR: &str = "RAWGLOW_DATA_DIR";
pub const ENV_CHECKPOINT_DIR: &str = "RAWGLOW_CHECKPOINT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub space_file: PathBuf,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            space_file: "space.txt".into(),
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub seed: u64,
    pub paths: Paths,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: CONFIG_SCHEMA,
            seed: 0,
            paths: Paths::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema {} unsupported (this build reads {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        self.train.validate()?;
        if self.denoiser.n_cameras == 0 {
            return Err(Error::Config("n_cameras must be positive".into()));
        }
        // schedule numbers are validated by building
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Parse, apply path overrides from the environment, validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Environment variables override paths only — never hyperparameters.
    pub fn apply_env_overrides(&mut self) {
        if let Ok(v) = std::env::var(ENV_SPACE_FILE) {
            self.paths.space_file = v.into();
        }
        if let Ok(v) = std::env::var(ENV_DATA_DIR) {
            self.paths.data_dir = v.into();
        }
        if let Ok(v) = std::env::var(ENV_CHECKPOINT_DIR) {
            self.paths.checkpoint_dir = v.into();
        }
    }

    /// Effective-config dump; re-parses to an identical value.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("encode: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
