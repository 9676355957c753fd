//! The run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use ppmamba::data_io::{SyntheticSpec, TileSpec};
use ppmamba::metrics::MetricScope;
use ppmamba::network::ModelConfig;
use ppmamba::train::{OptimizerConfig, ScheduleConfig};
use ppmamba::Error;
use serde::{Deserialize, Serialize};

fn default_data_path() -> PathBuf {
    PathBuf::from("data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory, written by `synth` and read by the other commands.
    #[serde(default = "default_data_path")]
    pub path: PathBuf,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: default_data_path(), synthetic: SyntheticSpec::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub tiling: TileSpec,
    #[serde(default)]
    pub metric_scope: MetricScope,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, Error> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.data.synthetic.validate()?;
        self.tiling.validate()?;
        if self.data.synthetic.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.synthetic.num_classes ({}) differs from model.num_classes ({})",
                self.data.synthetic.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }
}
