//! Run configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvParams;
use crate::federation::FedSchedule;
use crate::ppo::PpoHyper;
use crate::scenario::{self, MgDevices, NoiseModel, ScenarioDay, ScenarioError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything that defines one multi-microgrid training setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmgConfig {
    /// Scenario CSV; the bundled day is used when absent.
    pub scenario: Option<PathBuf>,
    pub devices: Vec<MgDevices>,
    pub env: EnvParams,
    pub noise: NoiseModel,
    pub ppo: PpoHyper,
    pub schedule: FedSchedule,
    /// Skip aggregation entirely (independent self-training).
    pub local_only: bool,
    /// Deterministic evaluation period in epochs.
    pub eval_every: usize,
    pub timeout_secs: u64,
}

impl Default for MmgConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            devices: scenario::default_device_params(),
            env: EnvParams::default(),
            noise: NoiseModel::default(),
            ppo: PpoHyper::default(),
            schedule: FedSchedule::default(),
            local_only: false,
            eval_every: 10,
            timeout_secs: 60,
        }
    }
}

impl MmgConfig {
    pub fn load_scenario(&self) -> Result<ScenarioDay, ConfigError> {
        Ok(match &self.scenario {
            Some(p) => scenario::load_scenario(p)?,
            None => scenario::default_scenario(),
        })
    }

    pub fn validate(&self, day: &ScenarioDay) -> Result<(), ConfigError> {
        if self.devices.len() != day.n_mg() {
            return Err(ConfigError::Invalid(format!(
                "{} device sets for {} microgrids",
                self.devices.len(),
                day.n_mg()
            )));
        }
        for (j, d) in self.devices.iter().enumerate() {
            d.validate().map_err(|e| ConfigError::Invalid(format!("MG{}: {e}", j + 1)))?;
        }
        if self.devices.iter().any(|d| d.action_dim() != self.devices[0].action_dim()) {
            return Err(ConfigError::Invalid("all microgrids need the same device counts to share one model".into()));
        }
        self.ppo.validate().map_err(ConfigError::Invalid)?;
        self.schedule.validate().map_err(ConfigError::Invalid)?;
        self.env.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.noise.wind_pv_std < 0.0 || self.noise.load_std < 0.0 {
            return Err(ConfigError::Invalid("noise standard deviations must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    #[default]
    Inproc,
    Tcp,
}

/// Top-level file layout: run options plus an `[mmg]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub transport: TransportMode,
    pub mmg: MmgConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seeds: vec![1], out: PathBuf::from("runs"), transport: TransportMode::Inproc, mmg: MmgConfig::default() }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Toml { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
