use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NnConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Defunet,
    Unet,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Defunet => "defunet",
            Arch::Unet => "unet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub levels: usize,
    pub base_filters: usize,
    /// Explicit per-level widths; overrides `base_filters` when set.
    pub filters: Option<Vec<usize>>,
    /// Recurrent steps per unit.
    pub recurrence: usize,
    /// Recurrent units per DCRC block.
    pub units: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Feed the fused bottom features (rather than the plain encoder
    /// output) into the decoder.
    pub fuse_bottom: bool,
    pub alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub inception_batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let nn = NnConfig::default();
        ModelConfig {
            arch: Arch::Defunet,
            levels: 5,
            base_filters: 32,
            filters: None,
            recurrence: 2,
            units: 2,
            in_channels: 1,
            out_channels: 1,
            fuse_bottom: true,
            alpha: nn.alpha,
            bn_momentum: nn.bn_momentum,
            bn_eps: nn.bn_eps,
            inception_batchnorm: nn.inception_batchnorm,
        }
    }
}

impl ModelConfig {
    pub fn unet() -> Self {
        ModelConfig {
            arch: Arch::Unet,
            ..Default::default()
        }
    }

    pub fn with_base_filters(mut self, f: usize) -> Self {
        self.base_filters = f;
        self.filters = None;
        self
    }

    pub fn nn(&self) -> NnConfig {
        NnConfig {
            alpha: self.alpha,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            inception_batchnorm: self.inception_batchnorm,
        }
    }

    /// Per-level widths: `f, 2f, 4f, ...` doubling down to the level above
    /// the bottom, which the bottom repeats.
    pub fn filter_schedule(&self) -> Result<Vec<usize>> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        let filters = match &self.filters {
            Some(f) => {
                if f.len() != self.levels {
                    return Err(Error::Config(format!(
                        "filter schedule has {} entries for {} levels",
                        f.len(),
                        self.levels
                    )));
                }
                f.clone()
            }
            None => {
                let mut f: Vec<usize> = (0..self.levels - 1).map(|i| self.base_filters << i).collect();
                f.push(f[self.levels - 2]);
                f
            }
        };
        if filters.contains(&0) {
            return Err(Error::Config("filter widths must be positive".into()));
        }
        if filters[self.levels - 1] != filters[self.levels - 2] {
            return Err(Error::Config(format!(
                "bottom level width {} must equal the level above it ({})",
                filters[self.levels - 1],
                filters[self.levels - 2]
            )));
        }
        Ok(filters)
    }

    pub fn validate(&self) -> Result<()> {
        self.filter_schedule()?;
        if self.units == 0 {
            return Err(Error::Config("units must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(
                "batch norm eps must be positive and momentum in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_repeats_fourth_level() {
        assert_eq!(
            ModelConfig::default().filter_schedule().unwrap(),
            vec![32, 64, 128, 256, 256]
        );
    }

    #[test]
    fn explicit_schedule_is_checked() {
        let mut c = ModelConfig {
            filters: Some(vec![8, 16, 32, 64, 128]),
            ..Default::default()
        };
        assert!(c.filter_schedule().is_err());
        c.filters = Some(vec![8, 16, 32, 32]);
        assert!(c.filter_schedule().is_err());
        c.levels = 1;
        assert!(c.filter_schedule().is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ModelConfig::unet().with_base_filters(4);
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(ModelConfig::from_toml("widht = 3").is_err());
    }
}
