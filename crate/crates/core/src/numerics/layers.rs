//! Layers as thin handles onto entries of a [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use super::graph::{BatchNormArgs, Graph, Var};
use super::params::{glorot_uniform, uniform, EntryKind, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct NormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

/// 3x3 (or any odd square) same-padded convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub filters: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = [kernel, kernel, in_channels, filters];
        let w = glorot_uniform(&shape, kernel * kernel * in_channels, kernel * kernel * filters, rng);
        Ok(Conv2d {
            weight: store.add(&format!("{name}/w"), EntryKind::Trainable, w)?,
            bias: store.add(&format!("{name}/b"), EntryKind::Trainable, Tensor::zeros(&[filters]))?,
            in_channels,
            filters,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b)
    }
}

/// Batch normalization over the trailing channel axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub cfg: NormConfig,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: NormConfig) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(
                &format!("{name}/gamma"),
                EntryKind::Trainable,
                Tensor::full(&[channels], 1.0),
            )?,
            beta: store.add(
                &format!("{name}/beta"),
                EntryKind::Trainable,
                Tensor::zeros(&[channels]),
            )?,
            running_mean: store.add(
                &format!("{name}/running_mean"),
                EntryKind::Buffer,
                Tensor::zeros(&[channels]),
            )?,
            running_var: store.add(
                &format!("{name}/running_var"),
                EntryKind::Buffer,
                Tensor::full(&[channels], 1.0),
            )?,
            cfg,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(
            x,
            BatchNormArgs {
                gamma,
                beta,
                running_mean: store.get(self.running_mean),
                running_var: store.get(self.running_var),
                mean_id: self.running_mean,
                var_id: self.running_var,
                momentum: self.cfg.momentum,
                eps: self.cfg.eps,
                frozen: store.is_frozen(self.running_mean),
            },
        )
    }
}

/// Affine map `x W + b`, `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = glorot_uniform(&[inputs, outputs], inputs, outputs, rng);
        Ok(Dense {
            weight: store.add(&format!("{name}/w"), EntryKind::Trainable, w)?,
            bias: store.add(&format!("{name}/b"), EntryKind::Trainable, Tensor::zeros(&[outputs]))?,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let last = *g.shape(x).last().unwrap();
        if last != self.inputs {
            return Err(Error::config(format!(
                "dense layer expects {} inputs, got {last}",
                self.inputs
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// One direction of an LSTM; gates packed as `[i, f, g, o]`.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    fn new(store: &mut ParamStore, name: &str, features: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let limit = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden]);
        // forget-gate bias starts at 1
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        Ok(LstmDirection {
            w_input: store.add(
                &format!("{name}/w_input"),
                EntryKind::Trainable,
                uniform(&[features, 4 * hidden], limit, rng),
            )?,
            w_hidden: store.add(
                &format!("{name}/w_hidden"),
                EntryKind::Trainable,
                uniform(&[hidden, 4 * hidden], limit, rng),
            )?,
            bias: store.add(&format!("{name}/b"), EntryKind::Trainable, bias)?,
            hidden,
        })
    }

    /// Run over `seq` (`[N, T, F]`) in the given time order and return the
    /// final hidden state `[N, H]`.
    fn run(&self, g: &mut Graph, store: &ParamStore, seq: Var, order: impl Iterator<Item = usize>) -> Result<Var> {
        let wx = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let b = g.param(store, self.bias);
        let hd = self.hidden;
        let mut state: Option<(Var, Var)> = None;
        for t in order {
            let xt = g.time_step(seq, t)?;
            let mut gates = g.matmul(xt, wx)?;
            if let Some((h, _)) = state {
                let rec = g.matmul(h, wh)?;
                gates = g.add(gates, rec)?;
            }
            let gates = g.add_bias(gates, b)?;
            let i = g.slice_cols(gates, 0, hd)?;
            let f = g.slice_cols(gates, hd, hd)?;
            let c_in = g.slice_cols(gates, 2 * hd, hd)?;
            let o = g.slice_cols(gates, 3 * hd, hd)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let c_in = g.tanh(c_in);
            let o = g.sigmoid(o);
            let written = g.mul(i, c_in)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let kept = g.mul(f, c_prev)?;
                    g.add(kept, written)?
                }
                None => written,
            };
            let c_act = g.tanh(c);
            let h = g.mul(o, c_act)?;
            state = Some((h, c));
        }
        state
            .map(|(h, _)| h)
            .ok_or_else(|| Error::invalid("LSTM over an empty sequence"))
    }
}

/// Bidirectional LSTM returning `[h_forward(T-1), h_backward(0)]`, i.e. the
/// states aligned with the last and the first time step.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub features: usize,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(BiLstm {
            forward: LstmDirection::new(store, &format!("{name}/fwd"), features, hidden, rng)?,
            backward: LstmDirection::new(store, &format!("{name}/bwd"), features, hidden, rng)?,
            features,
        })
    }

    pub fn output_width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.features {
            return Err(Error::shape(format!(
                "Bi-LSTM expects [N, T, {}], got {s:?}",
                self.features
            )));
        }
        let steps = s[1];
        let hf = self.forward.run(g, store, seq, 0..steps)?;
        let hb = self.backward.run(g, store, seq, (0..steps).rev())?;
        g.concat(&[hf, hb])
    }
}
