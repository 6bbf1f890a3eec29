use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{BatchNorm, BiLstm, Conv2d, Dense, Graph, NormConfig, ParamStore, Var};

/// Dropout, dense, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct FcBlock {
    pub dense: Dense,
    pub norm: BatchNorm,
    pub dropout: f64,
}

impl FcBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        dropout: f64,
        norm: NormConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FcBlock {
            dense: Dense::new(store, &format!("{name}/dense"), inputs, outputs, rng)?,
            norm: BatchNorm::new(store, &format!("{name}/bn"), outputs, norm)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = if self.dropout > 0.0 {
            g.dropout(x, self.dropout)
        } else {
            x
        };
        let y = self.dense.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: BatchNorm,
}

/// Spectrogram encoder `f_a`: `[N, T, B, C]` to `[N, d]`.
#[derive(Clone, Debug)]
pub struct AccelEncoder {
    input_norm: BatchNorm,
    blocks: Vec<ConvBlock>,
    bottleneck: FcBlock,
    expand: FcBlock,
    input_shape: [usize; 3],
    flat: usize,
}

impl AccelEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let norm = NormConfig {
            momentum: cfg.bn_momentum,
            eps: cfg.bn_eps,
        };
        let input_norm = BatchNorm::new(store, &format!("{name}/bn_in"), cfg.spectrogram_channels, norm)?;
        let mut blocks = Vec::new();
        let mut cin = cfg.spectrogram_channels;
        for (k, &filters) in cfg.conv_filters.iter().enumerate() {
            blocks.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}/conv{k}"), cin, filters, cfg.kernel, rng)?,
                norm: BatchNorm::new(store, &format!("{name}/conv{k}_bn"), filters, norm)?,
            });
            cin = filters;
        }
        let flat = cfg.conv_output_width();
        Ok(AccelEncoder {
            input_norm,
            blocks,
            bottleneck: FcBlock::new(
                store,
                &format!("{name}/fc0"),
                flat,
                cfg.bottleneck,
                cfg.dropout,
                norm,
                rng,
            )?,
            expand: FcBlock::new(
                store,
                &format!("{name}/fc1"),
                cfg.bottleneck,
                cfg.embedding_dim,
                cfg.dropout,
                norm,
                rng,
            )?,
            input_shape: [cfg.spectrogram_time, cfg.spectrogram_bands, cfg.spectrogram_channels],
            flat,
        })
    }

    pub fn flattened_width(&self) -> usize {
        self.flat
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::shape(format!(
                "accel encoder expects [N, {}, {}, {}], got {s:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        let mut h = self.input_norm.forward(g, store, x)?;
        for b in &self.blocks {
            h = b.conv.forward(g, store, h)?;
            h = b.norm.forward(g, store, h)?;
            h = g.relu(h);
            h = g.max_pool2(h)?;
        }
        let h = g.reshape(h, &[s[0], self.flat])?;
        let h = self.bottleneck.forward(g, store, h)?;
        self.expand.forward(g, store, h)
    }
}

/// Location encoder `f_l`: `([N, T, 2], [N, 5])` to `[N, d]`.
#[derive(Clone, Debug)]
pub struct LocEncoder {
    input_norm: BatchNorm,
    lstm: BiLstm,
    blocks: Vec<FcBlock>,
    steps: usize,
    scalars: usize,
}

impl LocEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let norm = NormConfig {
            momentum: cfg.bn_momentum,
            eps: cfg.bn_eps,
        };
        let input_norm = BatchNorm::new(store, &format!("{name}/bn_in"), cfg.loc_features, norm)?;
        let lstm = BiLstm::new(store, &format!("{name}/bilstm"), cfg.loc_features, cfg.lstm_cells, rng)?;
        let mut width = lstm.output_width() + cfg.loc_scalars;
        let mut blocks = Vec::new();
        for (k, &w) in cfg.loc_fc_widths.iter().enumerate() {
            blocks.push(FcBlock::new(store, &format!("{name}/fc{k}"), width, w, 0.0, norm, rng)?);
            width = w;
        }
        Ok(LocEncoder {
            input_norm,
            lstm,
            blocks,
            steps: cfg.loc_steps,
            scalars: cfg.loc_scalars,
        })
    }

    /// Width of the Bi-LSTM states plus the hand-crafted scalars.
    pub fn concat_width(&self) -> usize {
        self.lstm.output_width() + self.scalars
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var, scalars: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[1] != self.steps {
            return Err(Error::shape(format!(
                "location encoder expects [N, {}, F], got {s:?}",
                self.steps
            )));
        }
        let sc = g.shape(scalars).to_vec();
        if sc != [s[0], self.scalars] {
            return Err(Error::shape(format!(
                "location scalars must be [{}, {}], got {sc:?}",
                s[0], self.scalars
            )));
        }
        let x = self.input_norm.forward(g, store, seq)?;
        let states = self.lstm.forward(g, store, x)?;
        let mut h = g.concat(&[states, scalars])?;
        for b in &self.blocks {
            h = b.forward(g, store, h)?;
        }
        Ok(h)
    }
}

/// Gated attention over instance embeddings.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub v: crate::numerics::ParamId,
    pub u: crate::numerics::ParamId,
    pub w: crate::numerics::ParamId,
    pub dim: usize,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        use crate::numerics::{glorot_uniform, EntryKind};
        Ok(AttentionPool {
            v: store.add(
                &format!("{name}/V"),
                EntryKind::Trainable,
                glorot_uniform(&[dim, inner], dim, inner, rng),
            )?,
            u: store.add(
                &format!("{name}/U"),
                EntryKind::Trainable,
                glorot_uniform(&[dim, inner], dim, inner, rng),
            )?,
            w: store.add(
                &format!("{name}/w"),
                EntryKind::Trainable,
                glorot_uniform(&[inner, 1], inner, 1, rng),
            )?,
            dim,
        })
    }

    /// Instance weights `[B, N]` for stacked embeddings `[B, N, d]`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(format!(
                "attention expects [B, N, {}], got {s:?}",
                self.dim
            )));
        }
        let v = g.param(store, self.v);
        let u = g.param(store, self.u);
        let w = g.param(store, self.w);
        let th = g.matmul(h, v)?;
        let th = g.tanh(th);
        let gate = g.matmul(h, u)?;
        let gate = g.sigmoid(gate);
        let gated = g.mul(th, gate)?;
        let scores = g.matmul(gated, w)?;
        let scores = g.reshape(scores, &[s[0], s[1]])?;
        Ok(g.softmax(scores))
    }

    /// Returns the pooled embedding `[B, d]` and the weights `[B, N]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        let a = self.weights(g, store, h)?;
        let z = g.weighted_pool(h, a)?;
        Ok((z, a))
    }
}

/// Output head producing per-class logits.
#[derive(Clone, Debug)]
pub enum Head {
    /// FC block then a dense layer (the classifier `c`).
    Classifier { block: FcBlock, out: Dense },
    /// Single dense layer, used by the uni-modal baselines.
    Linear { out: Dense },
}

impl Head {
    pub fn classifier(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        inputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let norm = NormConfig {
            momentum: cfg.bn_momentum,
            eps: cfg.bn_eps,
        };
        Ok(Head::Classifier {
            block: FcBlock::new(
                store,
                &format!("{name}/fc"),
                inputs,
                cfg.classifier_hidden,
                0.0,
                norm,
                rng,
            )?,
            out: Dense::new(store, &format!("{name}/out"), cfg.classifier_hidden, cfg.n_classes, rng)?,
        })
    }

    pub fn linear(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        inputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Head::Linear {
            out: Dense::new(store, &format!("{name}/out"), inputs, cfg.n_classes, rng)?,
        })
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        match self {
            Head::Classifier { block, out } => {
                let h = block.forward(g, store, z)?;
                out.forward(g, store, h)
            }
            Head::Linear { out } => out.forward(g, store, z),
        }
    }
}
