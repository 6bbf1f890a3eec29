use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network variants buildable from the shared components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Accel instances + one location instance, gated attention over all.
    FusionMil,
    /// Attention over accel instances only, linear sigmoid head.
    AccMil,
    /// One `d`-minute accel window, linear sigmoid head.
    AccCnn,
    /// Location encoder, linear sigmoid head.
    LocLstm,
    /// Concatenated accel (one `d`-minute window) and location embeddings.
    FusionConcat,
    /// Concatenated accel-MIL and location embeddings.
    FusionConcatPlus,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::FusionMil,
        Architecture::AccMil,
        Architecture::AccCnn,
        Architecture::LocLstm,
        Architecture::FusionConcat,
        Architecture::FusionConcatPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::FusionMil => "fusion-mil",
            Architecture::AccMil => "acc-mil",
            Architecture::AccCnn => "acc-cnn",
            Architecture::LocLstm => "loc-lstm",
            Architecture::FusionConcat => "fusion-concat",
            Architecture::FusionConcatPlus => "fusion-concat-plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown architecture {s}")))
    }

    pub fn uses_accel(self) -> bool {
        !matches!(self, Architecture::LocLstm)
    }

    pub fn uses_location(self) -> bool {
        matches!(
            self,
            Architecture::FusionMil
                | Architecture::LocLstm
                | Architecture::FusionConcat
                | Architecture::FusionConcatPlus
        )
    }

    /// Whether the accel branch sees one long window instead of one-minute
    /// instances.
    pub fn uses_wide_window(self) -> bool {
        matches!(self, Architecture::AccCnn | Architecture::FusionConcat)
    }

    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            Architecture::FusionMil | Architecture::AccMil | Architecture::FusionConcatPlus
        )
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture descriptor and layer widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_classes: usize,
    /// One-minute accel instances per bag (MIL variants) or minutes covered
    /// by the single wide window (Acc-CNN, Fusion-Concat).
    pub accel_minutes: usize,
    pub spectrogram_time: usize,
    pub spectrogram_bands: usize,
    pub spectrogram_channels: usize,
    pub conv_filters: Vec<usize>,
    pub kernel: usize,
    pub bottleneck: usize,
    pub embedding_dim: usize,
    pub attention_dim: usize,
    pub lstm_cells: usize,
    pub loc_steps: usize,
    pub loc_features: usize,
    pub loc_scalars: usize,
    pub loc_fc_widths: Vec<usize>,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::FusionMil,
            n_classes: 8,
            accel_minutes: 3,
            spectrogram_time: 51,
            spectrogram_bands: 51,
            spectrogram_channels: 2,
            conv_filters: vec![16, 32, 64],
            kernel: 3,
            bottleneck: 128,
            embedding_dim: 256,
            attention_dim: 256,
            lstm_cells: 128,
            loc_steps: 10,
            loc_features: 2,
            loc_scalars: 5,
            loc_fc_widths: vec![256, 256, 256],
            classifier_hidden: 128,
            dropout: 0.3,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn for_architecture(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.accel_minutes == 0 {
            return Err(Error::config("accel_minutes must be >= 1"));
        }
        if self.loc_fc_widths.last() != Some(&self.embedding_dim) {
            return Err(Error::config(
                "last location FC width must equal the embedding dimension",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        let mut h = self.spectrogram_time;
        let mut w = self.spectrogram_bands;
        for _ in &self.conv_filters {
            if h < self.kernel.max(2) || w < self.kernel.max(2) {
                return Err(Error::config("spectrogram too small for the conv stack"));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Flattened width after the conv/pool stack.
    pub fn conv_output_width(&self) -> usize {
        let mut h = self.spectrogram_time;
        let mut w = self.spectrogram_bands;
        for _ in &self.conv_filters {
            h /= 2;
            w /= 2;
        }
        h * w * self.conv_filters.last().copied().unwrap_or(self.spectrogram_channels)
    }

    /// Accel instances per bag seen by the attention or CNN branch.
    pub fn accel_instances(&self) -> usize {
        if self.architecture.uses_wide_window() {
            1
        } else {
            self.accel_minutes
        }
    }
}
