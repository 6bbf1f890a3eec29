use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Listed classes with no true instance; their scores count as 0.
    pub absent: Vec<usize>,
    /// `confusion[true][predicted]` over all `n_classes`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut c = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::invalid(format!("class index outside [0, {n_classes})")));
        }
        c[y][p] += 1;
    }
    Ok(c)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Accuracy and macro averages over every class in `0..n_classes`.
pub fn metrics(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<Metrics> {
    let all: Vec<usize> = (0..n_classes).collect();
    metrics_over(pred, labels, n_classes, &all)
}

/// Macro averages restricted to `classes` (e.g. the modes present in a
/// synthetic dataset). Accuracy always counts every sample.
pub fn metrics_over(pred: &[usize], labels: &[usize], n_classes: usize, classes: &[usize]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::invalid("metrics of an empty prediction set"));
    }
    if classes.is_empty() || classes.iter().any(|&c| c >= n_classes) {
        return Err(Error::invalid(
            "macro classes must be a non-empty subset of the label set",
        ));
    }
    let confusion = confusion_matrix(pred, labels, n_classes)?;
    let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
    let mut per_class = Vec::with_capacity(classes.len());
    let mut absent = Vec::new();
    for &k in classes {
        let tp = confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..n_classes).map(|y| confusion[y][k]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if support == 0 || precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if support == 0 {
            absent.push(k);
        }
        per_class.push(ClassMetrics {
            class: k,
            precision,
            recall,
            f1,
            support,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        per_class,
        absent,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(false positive rate, true positive rate)` from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// One-vs-rest ROC with one point per distinct score threshold and the
/// trapezoid AUC. `None` when there are no positives or no negatives.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<(Vec<(f64, f64)>, f64)> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 || scores.len() != positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Some((points, auc))
}

/// ROC curves of every class present among `labels`, scored by its column
/// of `probs`.
pub fn roc_per_class(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Vec<RocCurve> {
    (0..n_classes)
        .filter_map(|k| {
            let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            roc_curve(&scores, &pos).map(|(points, auc)| RocCurve { class: k, points, auc })
        })
        .collect()
}

/// Mean, sample standard deviation and every value of a repeated measure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary {
            mean,
            std,
            values: values.to_vec(),
        }
    }

    /// `"92.6 ± 1.0"` style, in percent.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}
