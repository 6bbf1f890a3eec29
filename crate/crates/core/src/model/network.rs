use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, ModelConfig};
use super::encoders::{AccelEncoder, AttentionPool, Head, LocEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mode, ParamStore, Tensor, Var};

/// Parameter-name prefixes shared by every architecture, so encoders can be
/// transferred between variants.
pub const ACCEL_PREFIX: &str = "f_a/";
pub const LOC_PREFIX: &str = "f_l/";
pub const ATTENTION_PREFIX: &str = "mil/";
pub const HEAD_PREFIX: &str = "head/";

/// Tensors for a batch of `bags` bags.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub bags: usize,
    /// `[bags * instances, T, B, C]`, the instances of one bag contiguous
    /// and in time order.
    pub accel: Option<Tensor>,
    pub accel_instances: usize,
    /// `[bags, steps, 2]`.
    pub loc_seq: Option<Tensor>,
    /// `[bags, 5]`.
    pub loc_scalars: Option<Tensor>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
    /// `[bags, N]` attention weights for the attention variants.
    pub attention: Option<Var>,
    /// Fused embedding fed to the head.
    pub fused: Var,
}

/// Per-bag outputs gathered after an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    /// Instance weights in bag order (accel first, then location).
    pub attention: Vec<f64>,
    pub accel_weight: f64,
    pub loc_weight: f64,
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    accel: Option<AccelEncoder>,
    loc: Option<LocEncoder>,
    attention: Option<AttentionPool>,
    head: Head,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let accel = if arch.uses_accel() {
            Some(AccelEncoder::new(&mut store, "f_a", &config, &mut rng)?)
        } else {
            None
        };
        let loc = if arch.uses_location() {
            Some(LocEncoder::new(&mut store, "f_l", &config, &mut rng)?)
        } else {
            None
        };
        let attention = if arch.uses_attention() {
            Some(AttentionPool::new(
                &mut store,
                "mil",
                config.embedding_dim,
                config.attention_dim,
                &mut rng,
            )?)
        } else {
            None
        };
        let d = config.embedding_dim;
        let head = match arch {
            Architecture::FusionMil => Head::classifier(&mut store, "head", &config, d, &mut rng)?,
            Architecture::FusionConcat | Architecture::FusionConcatPlus => {
                Head::classifier(&mut store, "head", &config, 2 * d, &mut rng)?
            }
            Architecture::AccMil | Architecture::AccCnn | Architecture::LocLstm => {
                Head::linear(&mut store, "head", &config, d, &mut rng)?
            }
        };
        Ok(Model {
            config,
            store,
            accel,
            loc,
            attention,
            head,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count("")
    }

    pub fn accel_encoder(&self) -> Option<&AccelEncoder> {
        self.accel.as_ref()
    }

    pub fn loc_encoder(&self) -> Option<&LocEncoder> {
        self.loc.as_ref()
    }

    fn check_input(&self, input: &BatchInput) -> Result<()> {
        let arch = self.architecture();
        if arch.uses_accel() {
            let a = input
                .accel
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("{arch} needs accel instances")))?;
            let want = self.config.accel_instances();
            if input.accel_instances != want || a.shape()[0] != input.bags * want {
                return Err(Error::shape(format!(
                    "{arch} expects {want} accel instances per bag, batch has {} rows for {} bags",
                    a.shape()[0],
                    input.bags
                )));
            }
        }
        if arch.uses_location() && (input.loc_seq.is_none() || input.loc_scalars.is_none()) {
            return Err(Error::invalid(format!("{arch} needs location windows")));
        }
        Ok(())
    }

    /// Build the forward graph for a batch against `store` (usually
    /// `self.store`; gradient checks pass perturbed copies).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, input: &BatchInput) -> Result<ForwardVars> {
        self.check_input(input)?;
        let accel = match (&self.accel, &input.accel) {
            (Some(enc), Some(t)) => {
                let x = g.input(t.clone());
                Some(enc.forward(g, store, x)?)
            }
            _ => None,
        };
        let loc = match (&self.loc, &input.loc_seq, &input.loc_scalars) {
            (Some(enc), Some(seq), Some(sc)) => {
                let s = g.input(seq.clone());
                let c = g.input(sc.clone());
                Some(enc.forward(g, store, s, c)?)
            }
            _ => None,
        };
        let n_a = input.accel_instances;
        let (fused, attention) = match self.architecture() {
            Architecture::FusionMil => {
                let h = g.stack_instances(&[(accel.unwrap(), n_a), (loc.unwrap(), 1)])?;
                let (z, a) = self.attention.as_ref().unwrap().forward(g, store, h)?;
                (z, Some(a))
            }
            Architecture::AccMil => {
                let h = g.stack_instances(&[(accel.unwrap(), n_a)])?;
                let (z, a) = self.attention.as_ref().unwrap().forward(g, store, h)?;
                (z, Some(a))
            }
            Architecture::FusionConcatPlus => {
                let h = g.stack_instances(&[(accel.unwrap(), n_a)])?;
                let (za, a) = self.attention.as_ref().unwrap().forward(g, store, h)?;
                (g.concat(&[za, loc.unwrap()])?, Some(a))
            }
            Architecture::FusionConcat => (g.concat(&[accel.unwrap(), loc.unwrap()])?, None),
            Architecture::AccCnn => (accel.unwrap(), None),
            Architecture::LocLstm => (loc.unwrap(), None),
        };
        let logits = self.head.logits(g, store, fused)?;
        let probs = g.sigmoid(logits);
        Ok(ForwardVars {
            logits,
            probs,
            attention,
            fused,
        })
    }

    pub fn forward(&self, g: &mut Graph, input: &BatchInput) -> Result<ForwardVars> {
        self.forward_with(g, &self.store, input)
    }

    /// Inference-mode predictions with attention diagnostics.
    pub fn predict(&self, input: &BatchInput) -> Result<Vec<Prediction>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = self.forward(&mut g, input)?;
        let m = self.config.n_classes;
        let probs = g.value(out.probs).data();
        let att = out.attention.map(|a| g.value(a).clone());
        let n_attended = att.as_ref().map_or(0, |a| a.shape()[1]);
        let accel_slots = match self.architecture() {
            Architecture::FusionMil | Architecture::AccMil | Architecture::FusionConcatPlus => input.accel_instances,
            _ => 0,
        };
        let mut preds = Vec::with_capacity(input.bags);
        for b in 0..input.bags {
            let p = probs[b * m..(b + 1) * m].to_vec();
            let attention = att
                .as_ref()
                .map(|a| a.data()[b * n_attended..(b + 1) * n_attended].to_vec())
                .unwrap_or_default();
            let accel_weight: f64 = attention[..accel_slots.min(attention.len())].iter().sum();
            let loc_weight: f64 = attention[accel_slots.min(attention.len())..].iter().sum();
            preds.push(Prediction {
                label: argmax(&p),
                probs: p,
                attention,
                accel_weight,
                loc_weight,
            });
        }
        Ok(preds)
    }
}
