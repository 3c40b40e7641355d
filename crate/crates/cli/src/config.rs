use std::path::{Path, PathBuf};

use defunet::data::{AugmentConfig, CrossMode};
use defunet::model::ModelConfig;
use defunet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where samples come from and how they are prepared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generate the two-ellipse dataset instead of reading PNGs.
    pub synthetic: bool,
    pub synthetic_count: usize,
    /// Root holding `montgomery/` and `shenzhen/`.
    pub data_dir: Option<PathBuf>,
    /// Square side length images are resized to.
    pub size: usize,
    /// Train, validation and test counts.
    pub split: [usize; 3],
    /// Train on one source and test on the other.
    pub cross: Option<CrossMode>,
    /// Share of the training source held out for validation in cross mode.
    pub cross_val_fraction: f64,
    pub dilate_radius: usize,
    pub dilate_iterations: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: false,
            synthetic_count: 704,
            data_dir: None,
            size: 512,
            split: [528, 76, 100],
            cross: None,
            cross_val_fraction: 0.1,
            dilate_radius: 1,
            dilate_iterations: 1,
        }
    }
}

/// Everything a run needs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/defunet"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        let d = &self.data;
        if d.size == 0 || d.size % self.model.divisor() != 0 {
            return Err(CliError::Usage(format!(
                "data.size {} must be a positive multiple of {}",
                d.size,
                self.model.divisor()
            )));
        }
        if !d.synthetic && d.data_dir.is_none() {
            return Err(CliError::Usage(
                "set data.data_dir (or --data-dir) or enable synthetic data".into(),
            ));
        }
        Ok(())
    }
}
