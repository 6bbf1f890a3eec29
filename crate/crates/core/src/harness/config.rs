use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accel::MaskConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// CCE on sigmoid outputs rescaled to sum to one per row.
    NormalizedSigmoid,
    /// CCE on the raw sigmoid output of the true class.
    SigmoidCce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pretrain {
    None,
    Loc,
    Accel,
    Both,
}

impl Pretrain {
    pub const ALL: [Pretrain; 4] = [Pretrain::None, Pretrain::Loc, Pretrain::Accel, Pretrain::Both];

    pub fn accel(self) -> bool {
        matches!(self, Pretrain::Accel | Pretrain::Both)
    }

    pub fn loc(self) -> bool {
        matches!(self, Pretrain::Loc | Pretrain::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Pretrain::None => "none",
            Pretrain::Loc => "loc",
            Pretrain::Accel => "accel",
            Pretrain::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown pre-training mode {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
    pub mask: MaskConfig,
    pub loss: LossKind,
    pub pretrain: Pretrain,
    /// Freeze transferred encoders in the second stage.
    pub freeze_pretrained: bool,
    /// With several placements per target minute, sample one per epoch.
    pub one_placement_per_target: bool,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            batch: 32,
            max_epochs: 80,
            patience: 10,
            seed: 0,
            augment: true,
            mask: MaskConfig::default(),
            loss: LossKind::NormalizedSigmoid,
            pretrain: Pretrain::None,
            freeze_pretrained: true,
            one_placement_per_target: false,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn for_architecture(arch: Architecture) -> Self {
        TrainConfig {
            model: ModelConfig::for_architecture(arch),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
