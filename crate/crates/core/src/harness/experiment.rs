use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Pretrain, TrainConfig};
use super::interpret::{interpret_predictions, InterpretReport};
use super::metrics::{metrics_over, Metrics, Summary};
use super::train::{evaluate_bags, train, train_model, TrainOutcome};
use crate::data::{
    loso_folds, mixed_streams, BagConfig, BagDataset, Mode, Placement, PlacementPolicy, Session, SplitConfig,
    VirtualStream,
};
use crate::error::{Error, Result};
use crate::hmm::{estimate_transitions, viterbi, TransitionMatrix, N_STATES};
use crate::model::{Architecture, Model, ModelConfig, Prediction, ACCEL_PREFIX, LOC_PREFIX};
use crate::numerics::{load_checkpoint, save_checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Train and test on one placement at a time.
    PerPlacement,
    /// Train on every placement, test on each separately.
    AllPlacements,
    /// One virtual mixed-placement stream per session.
    MixedOne,
    /// Four virtual mixed-placement streams per session.
    MixedMultiple,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::PerPlacement,
        ExperimentKind::AllPlacements,
        ExperimentKind::MixedOne,
        ExperimentKind::MixedMultiple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PerPlacement => "per-placement",
            ExperimentKind::AllPlacements => "all-placements",
            ExperimentKind::MixedOne => "mixed-one",
            ExperimentKind::MixedMultiple => "mixed-multiple",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment {s}")))
    }

    fn mixed_streams(self) -> Option<usize> {
        match self {
            ExperimentKind::MixedOne => Some(1),
            ExperimentKind::MixedMultiple => Some(4),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub train: TrainConfig,
    pub runs: usize,
    pub split: SplitConfig,
    pub bags: BagConfig,
    /// Mean minutes between placement switches in mixed streams.
    pub mean_dwell: f64,
    /// Additive smoothing of the transition counts.
    pub hmm_alpha: f64,
    /// Restrict to these placements (all present when empty).
    pub placements: Vec<Placement>,
    /// Modes averaged by macro metrics (all eight when empty).
    pub classes: Vec<Mode>,
    /// Stop after this many LOSO folds per run (all when `None`).
    pub max_folds: Option<usize>,
    /// Where pre-training checkpoints go (a temp directory when `None`).
    pub work_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::AllPlacements,
            train: TrainConfig::default(),
            runs: 15,
            split: SplitConfig::default(),
            bags: BagConfig::default(),
            mean_dwell: 10.0,
            hmm_alpha: 1.0,
            placements: Vec::new(),
            classes: Vec::new(),
            max_folds: None,
            work_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.runs == 0 {
            return Err(Error::config("an experiment needs at least one run"));
        }
        Ok(())
    }

    /// Bag settings matching the model's inputs.
    pub fn bag_config(&self) -> BagConfig {
        bag_config_for(&self.bags, &self.train.model)
    }

    fn class_indices(&self) -> Vec<usize> {
        if self.classes.is_empty() {
            (0..N_STATES).collect()
        } else {
            self.classes.iter().map(|m| m.index()).collect()
        }
    }
}

pub(crate) fn bag_config_for(base: &BagConfig, model: &ModelConfig) -> BagConfig {
    let mut b = base.clone();
    let arch = model.architecture;
    if arch.uses_wide_window() {
        if model.accel_minutes > 1 {
            b.wide_minutes = Some(model.accel_minutes);
        }
    } else if arch.uses_accel() {
        b.accel_instances = model.accel_instances();
    }
    b
}

/// Test predictions of one fold and one reporting row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub run: usize,
    pub test_user: String,
    pub row: String,
    pub bags: usize,
    pub pre_hmm: Metrics,
    pub post_hmm: Metrics,
    pub best_epoch: usize,
    pub purged: usize,
}

/// Aggregate over runs of one reporting row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: String,
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub macro_precision: Summary,
    pub macro_recall: Summary,
    pub accuracy_hmm: Summary,
    pub macro_f1_hmm: Summary,
    pub macro_precision_hmm: Summary,
    pub macro_recall_hmm: Summary,
}

/// Pooled test predictions of a row, for confusion matrices and ROC files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PooledPredictions {
    pub labels: Vec<usize>,
    pub pre_hmm: Vec<usize>,
    pub post_hmm: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub runs: usize,
    pub folds: Vec<FoldResult>,
    /// One entry per row; the average row comes last for placement
    /// experiments.
    pub rows: Vec<RowSummary>,
    /// Predictions of the last run keyed by row.
    pub pooled: BTreeMap<String, PooledPredictions>,
    pub interpret: Option<InterpretReport>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.row == name)
    }
}

/// Viterbi-smoothed labels for bags `idx`, decoding each (session, stream)
/// sequence in target order. With `by_placement`, placements are decoded
/// as separate sequences.
pub fn smooth_predictions(
    ds: &BagDataset,
    idx: &[usize],
    probs: &[Vec<f64>],
    t: &TransitionMatrix,
    by_placement: bool,
) -> Vec<usize> {
    let mut groups: BTreeMap<(usize, usize, Option<Placement>), Vec<usize>> = BTreeMap::new();
    for (k, &i) in idx.iter().enumerate() {
        let b = &ds.bags[i];
        let pl = if by_placement {
            b.placements.first().copied()
        } else {
            None
        };
        groups.entry((b.session, b.stream, pl)).or_default().push(k);
    }
    let mut out = vec![0; idx.len()];
    for mut members in groups.into_values() {
        members.sort_by_key(|&k| ds.bags[idx[k]].target);
        let rows: Vec<[f64; N_STATES]> = members
            .iter()
            .map(|&k| std::array::from_fn(|c| probs[k].get(c).copied().unwrap_or(0.0)))
            .collect();
        for (&k, s) in members.iter().zip(viterbi(&rows, t)) {
            out[k] = s;
        }
    }
    out
}

fn dev_transitions(sessions: &[Session], test_user: &str, alpha: f64) -> Result<TransitionMatrix> {
    let labels: Vec<Vec<Option<Mode>>> = sessions
        .iter()
        .filter(|s| s.user != test_user)
        .map(|s| s.labels.clone())
        .collect();
    estimate_transitions(&labels, alpha)
}

fn accel_stage_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            architecture: Architecture::AccCnn,
            accel_minutes: 1,
            ..cfg.model.clone()
        },
        pretrain: Pretrain::None,
        one_placement_per_target: false,
        seed: cfg.seed.wrapping_add(101),
        ..cfg.clone()
    }
}

fn loc_stage_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            architecture: Architecture::LocLstm,
            ..cfg.model.clone()
        },
        pretrain: Pretrain::None,
        one_placement_per_target: true,
        seed: cfg.seed.wrapping_add(202),
        ..cfg.clone()
    }
}

const ACCEL_STAGE: &str = "stage1-accel";
const LOC_STAGE: &str = "stage1-loc";

fn stage_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.ckpt")), dir.join(format!("{stem}.json")))
}

fn save_stage(dir: &Path, stem: &str, model: &Model) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (ckpt, meta) = stage_paths(dir, stem);
    save_checkpoint(&model.store, &ckpt)?;
    std::fs::write(&meta, serde_json::to_string_pretty(&model.config)?).map_err(|e| Error::io(&meta, e))?;
    Ok(ckpt)
}

fn load_stage(dir: &Path, stem: &str) -> Result<Model> {
    let (ckpt, meta) = stage_paths(dir, stem);
    if !ckpt.exists() || !meta.exists() {
        return Err(Error::Checkpoint(format!(
            "missing stage-1 checkpoint {}",
            ckpt.display()
        )));
    }
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut model = Model::new(serde_json::from_str(&text)?, 0)?;
    load_checkpoint(&mut model.store, &ckpt)?;
    Ok(model)
}

/// Stage 1: train the selected uni-modal encoders through their baseline
/// heads (Acc-CNN on single minutes of every placement, Loc-LSTM once per
/// target) and write their checkpoints to `dir`.
pub fn pretrain_stage1(
    cfg: &TrainConfig,
    ds: &BagDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    dir: &Path,
) -> Result<Vec<TrainOutcome>> {
    if cfg.pretrain == Pretrain::None {
        return Err(Error::config("pre-training mode is none"));
    }
    let mut out = Vec::new();
    if cfg.pretrain.accel() {
        let o = train(&accel_stage_config(cfg), ds, train_idx, val_idx)?;
        save_stage(dir, ACCEL_STAGE, &o.model)?;
        out.push(o);
    }
    if cfg.pretrain.loc() {
        let o = train(&loc_stage_config(cfg), ds, train_idx, val_idx)?;
        save_stage(dir, LOC_STAGE, &o.model)?;
        out.push(o);
    }
    Ok(out)
}

/// Stage 2: a fresh `cfg.model` network takes the stage-1 encoders from
/// `dir`, optionally frozen, and trains the remaining layers with one
/// placement sampled per target.
pub fn pretrain_stage2(
    cfg: &TrainConfig,
    ds: &BagDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    dir: &Path,
) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let arch = model.architecture();
    let mut transfer = |stem: &str, prefix: &str, needed: bool| -> Result<()> {
        if !needed {
            return Ok(());
        }
        let src = load_stage(dir, stem)?;
        model.store.copy_prefix_from(&src.store, prefix)?;
        if cfg.freeze_pretrained {
            model.store.set_frozen(prefix, true);
        }
        Ok(())
    };
    transfer(ACCEL_STAGE, ACCEL_PREFIX, cfg.pretrain.accel() && arch.uses_accel())?;
    transfer(LOC_STAGE, LOC_PREFIX, cfg.pretrain.loc() && arch.uses_location())?;
    let stage2 = TrainConfig {
        one_placement_per_target: true,
        ..cfg.clone()
    };
    train_model(model, &stage2, ds, train_idx, val_idx)
}

pub fn pretrain_protocol(
    cfg: &TrainConfig,
    ds: &BagDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    dir: &Path,
) -> Result<TrainOutcome> {
    pretrain_stage1(cfg, ds, train_idx, val_idx, dir)?;
    pretrain_stage2(cfg, ds, train_idx, val_idx, dir)
}

struct RowPreds {
    row: String,
    labels: Vec<usize>,
    pre: Vec<usize>,
    post: Vec<usize>,
    probs: Vec<Vec<f64>>,
}

fn build_dataset(
    cfg: &ExperimentConfig,
    sessions: &[Session],
    placement: Option<Placement>,
    run: usize,
) -> Result<BagDataset> {
    let bags = cfg.bag_config();
    let policy = match (cfg.kind.mixed_streams(), placement) {
        (Some(k), _) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(7919 * run as u64));
            let mut streams: Vec<VirtualStream> = Vec::new();
            for s in sessions {
                streams.extend(mixed_streams(s, k, cfg.mean_dwell, &mut rng)?);
            }
            PlacementPolicy::Virtual(streams)
        }
        (None, Some(p)) => PlacementPolicy::One(p),
        (None, None) => PlacementPolicy::Each,
    };
    BagDataset::build(sessions, &policy, &bags)
}

fn restrict(sessions: &[Session], placements: &[Placement]) -> Vec<Session> {
    if placements.is_empty() {
        return sessions.to_vec();
    }
    sessions
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.accel.retain(|p, _| placements.contains(p));
            s
        })
        .collect()
}

fn present_placements(sessions: &[Session]) -> Vec<Placement> {
    let mut v: Vec<Placement> = sessions.iter().flat_map(|s| s.placements()).collect();
    v.sort();
    v.dedup();
    v
}

/// Train one model per fold on `ds` and return its test predictions split
/// into rows.
#[allow(clippy::too_many_arguments)]
fn run_fold(
    cfg: &ExperimentConfig,
    sessions: &[Session],
    ds: &BagDataset,
    fold_k: usize,
    spec: &crate::data::SplitSpec,
    run: usize,
    rows: &[(String, Option<Placement>)],
    folds: &mut Vec<FoldResult>,
    interp: &mut Vec<(Vec<usize>, Vec<Prediction>)>,
) -> Result<Vec<RowPreds>> {
    let idx = spec.assign(ds);
    if idx.test.is_empty() {
        return Ok(Vec::new());
    }
    let mut tc = cfg.train.clone();
    tc.seed = cfg.train.seed.wrapping_add(1000 * run as u64 + fold_k as u64);
    let outcome = if tc.pretrain == Pretrain::None {
        train(&tc, ds, &idx.train, &idx.validation)?
    } else {
        let dir = cfg
            .work_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join(format!("fusionmil-{}", std::process::id())))
            .join(format!("run{run}-fold{fold_k}"));
        let o = pretrain_protocol(&tc, ds, &idx.train, &idx.validation, &dir)?;
        let _ = std::fs::remove_dir_all(&dir);
        o
    };
    let transitions = dev_transitions(sessions, &spec.test_user, cfg.hmm_alpha)?;
    let classes = cfg.class_indices();
    let by_placement = cfg.kind.mixed_streams().is_none();
    let mut out = Vec::new();
    for (row, placement) in rows {
        let test: Vec<usize> = idx
            .test
            .iter()
            .copied()
            .filter(|&i| {
                let b = &ds.bags[i];
                match (cfg.kind.mixed_streams(), placement) {
                    (Some(_), _) => b.stream == 0,
                    (None, Some(p)) => b.placements.first() == Some(p),
                    (None, None) => true,
                }
            })
            .collect();
        if test.is_empty() {
            continue;
        }
        let (_, _, preds) = evaluate_bags(&outcome.model, ds, &test, tc.loss, tc.batch.max(64))?;
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let pre: Vec<usize> = preds.iter().map(|p| p.label).collect();
        let post = smooth_predictions(ds, &test, &probs, &transitions, by_placement);
        let labels = ds.labels(&test);
        folds.push(FoldResult {
            run,
            test_user: spec.test_user.clone(),
            row: row.clone(),
            bags: test.len(),
            pre_hmm: metrics_over(&pre, &labels, N_STATES, &classes)?,
            post_hmm: metrics_over(&post, &labels, N_STATES, &classes)?,
            best_epoch: outcome.best_epoch,
            purged: idx.purged,
        });
        if outcome.model.architecture().uses_attention() {
            interp.push((test.clone(), preds));
        }
        out.push(RowPreds {
            row: row.clone(),
            labels,
            pre,
            post,
            probs,
        });
    }
    Ok(out)
}

/// LOSO over users, repeated `runs` times with fresh initialisations and
/// validation splits. Metrics of a run pool the test predictions of all
/// folds; rows are then summarised across runs.
pub fn run_experiment(cfg: &ExperimentConfig, sessions: &[Session]) -> Result<EvalReport> {
    cfg.validate()?;
    let sessions = restrict(sessions, &cfg.placements);
    let placements = present_placements(&sessions);
    if placements.is_empty() {
        return Err(Error::Data("no accel placement available".into()));
    }
    let classes = cfg.class_indices();
    let placement_rows: Vec<(String, Option<Placement>)> =
        placements.iter().map(|p| (p.name().to_string(), Some(*p))).collect();
    let mut folds = Vec::new();
    let mut interp = Vec::new();
    let mut per_run: Vec<BTreeMap<String, (Metrics, Metrics)>> = Vec::new();
    let mut pooled: BTreeMap<String, PooledPredictions> = BTreeMap::new();
    let mut last_ds: Option<BagDataset> = None;

    for run in 0..cfg.runs {
        let specs = loso_folds(&sessions, &cfg.split, cfg.train.seed.wrapping_add(run as u64))?;
        let specs = &specs[..cfg.max_folds.unwrap_or(specs.len()).min(specs.len())];
        // (dataset, rows it reports) per training setup
        let setups: Vec<(BagDataset, Vec<(String, Option<Placement>)>)> = match cfg.kind {
            ExperimentKind::PerPlacement => placement_rows
                .iter()
                .map(|r| Ok((build_dataset(cfg, &sessions, r.1, run)?, vec![r.clone()])))
                .collect::<Result<_>>()?,
            ExperimentKind::AllPlacements => vec![(build_dataset(cfg, &sessions, None, run)?, placement_rows.clone())],
            ExperimentKind::MixedOne | ExperimentKind::MixedMultiple => {
                vec![(
                    build_dataset(cfg, &sessions, None, run)?,
                    vec![("mixed".to_string(), None)],
                )]
            }
        };
        let mut acc: BTreeMap<String, RowPreds> = BTreeMap::new();
        for (ds, rows) in &setups {
            // attention tables come from the last dataset only
            interp.clear();
            for (k, spec) in specs.iter().enumerate() {
                for r in run_fold(cfg, &sessions, ds, k, spec, run, rows, &mut folds, &mut interp)? {
                    let e = acc.entry(r.row.clone()).or_insert_with(|| RowPreds {
                        row: r.row.clone(),
                        labels: vec![],
                        pre: vec![],
                        post: vec![],
                        probs: vec![],
                    });
                    e.labels.extend(r.labels);
                    e.pre.extend(r.pre);
                    e.post.extend(r.post);
                    e.probs.extend(r.probs);
                }
            }
        }
        let mut m = BTreeMap::new();
        for (name, r) in &acc {
            m.insert(
                name.clone(),
                (
                    metrics_over(&r.pre, &r.labels, N_STATES, &classes)?,
                    metrics_over(&r.post, &r.labels, N_STATES, &classes)?,
                ),
            );
        }
        per_run.push(m);
        pooled = acc
            .into_iter()
            .map(|(k, r)| {
                (
                    k,
                    PooledPredictions {
                        labels: r.labels,
                        pre_hmm: r.pre,
                        post_hmm: r.post,
                        probs: r.probs,
                    },
                )
            })
            .collect();
        last_ds = setups.into_iter().last().map(|s| s.0);
    }

    let mut names: Vec<String> = match cfg.kind {
        ExperimentKind::MixedOne | ExperimentKind::MixedMultiple => vec!["mixed".into()],
        _ => placement_rows.iter().map(|r| r.0.clone()).collect(),
    };
    names.retain(|n| per_run.iter().all(|m| m.contains_key(n)));
    if names.is_empty() {
        return Err(Error::Data("no fold produced test bags".into()));
    }
    let summarise =
        |row: &str, pick: &dyn Fn(&BTreeMap<String, (Metrics, Metrics)>, fn(&Metrics) -> f64, bool) -> f64| {
            let s = |f: fn(&Metrics) -> f64, post: bool| {
                Summary::of(&per_run.iter().map(|m| pick(m, f, post)).collect::<Vec<_>>())
            };
            RowSummary {
                row: row.to_string(),
                accuracy: s(|m| m.accuracy, false),
                macro_f1: s(|m| m.macro_f1, false),
                macro_precision: s(|m| m.macro_precision, false),
                macro_recall: s(|m| m.macro_recall, false),
                accuracy_hmm: s(|m| m.accuracy, true),
                macro_f1_hmm: s(|m| m.macro_f1, true),
                macro_precision_hmm: s(|m| m.macro_precision, true),
                macro_recall_hmm: s(|m| m.macro_recall, true),
            }
        };
    let mut rows: Vec<RowSummary> = names
        .iter()
        .map(|n| {
            summarise(n, &|m, f, post| {
                let (a, b) = &m[n];
                f(if post { b } else { a })
            })
        })
        .collect();
    if names.len() > 1 {
        let avg = summarise("average", &|m, f, post| {
            names
                .iter()
                .map(|n| f(if post { &m[n].1 } else { &m[n].0 }))
                .sum::<f64>()
                / names.len() as f64
        });
        rows.push(avg);
    }
    let interpret = match (&last_ds, interp.is_empty()) {
        (Some(ds), false) => {
            let idx: Vec<usize> = interp.iter().flat_map(|(i, _)| i.iter().copied()).collect();
            let preds: Vec<Prediction> = interp.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
            Some(interpret_predictions(
                ds,
                &idx,
                &preds,
                cfg.train.model.accel_instances(),
            )?)
        }
        _ => None,
    };
    Ok(EvalReport {
        kind: cfg.kind,
        config: cfg.clone(),
        seed: cfg.train.seed,
        runs: cfg.runs,
        folds,
        rows,
        pooled,
        interpret,
    })
}
