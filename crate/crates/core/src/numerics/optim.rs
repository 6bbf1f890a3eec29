use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{EntryKind, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<ParamId, Vec<f64>>,
    pub second: BTreeMap<ParamId, Vec<f64>>,
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            state: OptimizerState::default(),
        }
    }

    /// Apply one update. Frozen entries and buffers are skipped; the whole
    /// step is rejected if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &[f64])]) -> Result<()> {
        for (id, g) in grads {
            let e = store.entry(*id);
            if g.len() != e.value.len() {
                return Err(Error::shape(format!(
                    "gradient of {} has {} values for {}",
                    e.name,
                    g.len(),
                    e.value.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", e.name)));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let e = store.entry(*id);
            if e.frozen || e.kind != EntryKind::Trainable {
                continue;
            }
            let n = g.len();
            let m = self.state.first.entry(*id).or_insert_with(|| vec![0.0; n]);
            let v = self.state.second.entry(*id).or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(*id).data_mut();
            for j in 0..n {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
