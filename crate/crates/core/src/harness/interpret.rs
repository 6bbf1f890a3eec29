use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::train::evaluate_bags;
use super::LossKind;
use crate::data::{BagDataset, Placement};
use crate::error::{Error, Result};
use crate::hmm::N_STATES;
use crate::model::{Model, Prediction};

/// Attention tables of a trained attention model. Per-class entries are
/// `None` for classes without bags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretReport {
    pub bags_per_class: [usize; N_STATES],
    /// Mean over bags of the std of the accel instance weights.
    pub attention_std: [Option<f64>; N_STATES],
    /// Mean weight an accel instance receives, by its placement.
    pub placement_weight: BTreeMap<Placement, f64>,
    /// Mean `(accel, location)` modality weights.
    pub modality_weight: [Option<(f64, f64)>; N_STATES],
}

fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Tables from predictions aligned with bag indices `idx`.
pub fn interpret_predictions(
    ds: &BagDataset,
    idx: &[usize],
    preds: &[Prediction],
    accel_slots: usize,
) -> Result<InterpretReport> {
    if idx.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} bags",
            preds.len(),
            idx.len()
        )));
    }
    let mut count = [0usize; N_STATES];
    let mut stds = [0.0; N_STATES];
    let mut modal = [(0.0, 0.0); N_STATES];
    let mut per_placement: BTreeMap<Placement, (f64, usize)> = BTreeMap::new();
    for (&i, p) in idx.iter().zip(preds) {
        if p.attention.len() < accel_slots {
            return Err(Error::invalid("predictions carry no accel attention weights"));
        }
        let bag = &ds.bags[i];
        let c = bag.label.index();
        let acc = &p.attention[..accel_slots];
        count[c] += 1;
        stds[c] += population_std(acc);
        modal[c].0 += p.accel_weight;
        modal[c].1 += p.loc_weight;
        for (w, pl) in acc.iter().zip(&bag.placements) {
            let e = per_placement.entry(*pl).or_default();
            e.0 += w;
            e.1 += 1;
        }
    }
    let per = |k: usize, v: f64| (count[k] > 0).then(|| v / count[k] as f64);
    Ok(InterpretReport {
        bags_per_class: count,
        attention_std: std::array::from_fn(|k| per(k, stds[k])),
        placement_weight: per_placement.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        modality_weight: std::array::from_fn(|k| {
            per(k, 1.0).map(|_| (modal[k].0 / count[k] as f64, modal[k].1 / count[k] as f64))
        }),
    })
}

/// Run inference on bags `idx` and tabulate the attention weights.
pub fn interpretability_report(model: &Model, ds: &BagDataset, idx: &[usize]) -> Result<InterpretReport> {
    if !model.architecture().uses_attention() {
        return Err(Error::config(format!(
            "{} has no attention weights",
            model.architecture()
        )));
    }
    let (_, _, preds) = evaluate_bags(model, ds, idx, LossKind::NormalizedSigmoid, 64)?;
    interpret_predictions(ds, idx, &preds, model.config.accel_instances())
}
