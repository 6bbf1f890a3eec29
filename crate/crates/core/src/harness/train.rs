use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LossKind, TrainConfig};
use crate::data::BagDataset;
use crate::error::{Error, Result};
use crate::model::{BatchInput, Model, Prediction};
use crate::numerics::{Adam, AdamConfig, Graph, Mode, Var, LOG_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Training bags visited per epoch.
    pub examples_per_epoch: usize,
    pub elapsed: Duration,
}

pub(crate) fn loss_var(g: &mut Graph, probs: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::NormalizedSigmoid => {
            let p = g.normalize_rows(probs);
            g.cce(p, labels, LOG_EPS)
        }
        LossKind::SigmoidCce => g.cce(probs, labels, LOG_EPS),
    }
}

/// Bags sharing a target minute, for one-placement-per-target sampling.
fn target_groups(ds: &BagDataset, idx: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for &i in idx {
        let b = &ds.bags[i];
        groups.entry((b.session, b.target, b.stream)).or_default().push(i);
    }
    groups.into_values().collect()
}

fn epoch_order(groups: &[Vec<usize>], one_per_target: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = if one_per_target {
        groups.iter().map(|g| g[rng.random_range(0..g.len())]).collect()
    } else {
        groups.iter().flatten().copied().collect()
    };
    order.shuffle(rng);
    order
}

/// Batches of `size`; a trailing single bag joins the previous batch since
/// training-mode batch norm needs two rows.
fn chunks(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Mean loss, accuracy and predictions over `idx` in inference mode.
pub fn evaluate_bags(
    model: &Model,
    ds: &BagDataset,
    idx: &[usize],
    loss: LossKind,
    batch: usize,
) -> Result<(f64, f64, Vec<Prediction>)> {
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (input, labels) = ds.batch::<ChaCha8Rng>(chunk, &model.config, None)?;
        let (l, p) = eval_batch(model, &input, &labels, loss)?;
        total += l * chunk.len() as f64;
        correct += p.iter().zip(&labels).filter(|(p, &y)| p.label == y).count();
        preds.extend(p);
    }
    let n = idx.len().max(1) as f64;
    Ok((total / n, correct as f64 / n, preds))
}

fn eval_batch(model: &Model, input: &BatchInput, labels: &[usize], loss: LossKind) -> Result<(f64, Vec<Prediction>)> {
    let preds = model.predict(input)?;
    let m = model.config.n_classes;
    let mut g = Graph::new(Mode::Eval, 0);
    let probs: Vec<f64> = preds.iter().flat_map(|p| p.probs.iter().copied()).collect();
    let pv = g.input(crate::numerics::Tensor::new(vec![preds.len(), m], probs)?);
    let l = loss_var(&mut g, pv, labels, loss)?;
    Ok((g.value(l).data()[0], preds))
}

/// Train a freshly initialised model.
pub fn train(cfg: &TrainConfig, ds: &BagDataset, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainOutcome> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    train_model(model, cfg, ds, train_idx, val_idx)
}

/// Continue training `model` (frozen entries stay untouched) and return
/// the weights with the lowest validation loss.
pub fn train_model(
    mut model: Model,
    cfg: &TrainConfig,
    ds: &BagDataset,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::invalid("training needs non-empty training and validation sets"));
    }
    if train_idx.len() < 2 {
        return Err(Error::invalid("batch norm needs at least two training bags"));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let groups = target_groups(ds, train_idx);
    let examples_per_epoch = if cfg.one_placement_per_target {
        groups.len()
    } else {
        train_idx.len()
    };
    let mut best = model.store.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(&groups, cfg.one_placement_per_target, &mut rng);
        let mut sum = 0.0;
        for chunk in chunks(&order, cfg.batch) {
            let (input, labels) = if cfg.augment {
                ds.batch(chunk, &model.config, Some((&cfg.mask, &mut rng)))?
            } else {
                ds.batch::<ChaCha8Rng>(chunk, &model.config, None)?
            };
            let mut g = Graph::new(Mode::Train, rng.random());
            let out = model.forward(&mut g, &input)?;
            let l = loss_var(&mut g, out.probs, &labels, cfg.loss)?;
            let value = g.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("training loss is {value}"),
                });
            }
            g.backward(l)?;
            let updates = g.take_stat_updates();
            adam.step(&mut model.store, &g.param_grads())
                .map_err(|e| Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                })?;
            model.store.apply_stat_updates(&updates);
            sum += value * chunk.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        let (val_loss, val_accuracy, _) = evaluate_bags(&model, ds, val_idx, cfg.loss, cfg.batch)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation loss is {val_loss}"),
            });
        }
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:3} train {train_loss:.4} val {val_loss:.4} acc {:.2}% ({:.0?})",
                100.0 * val_accuracy,
                started.elapsed()
            );
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.store = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss: best_loss,
        examples_per_epoch,
        elapsed: started.elapsed(),
    })
}
