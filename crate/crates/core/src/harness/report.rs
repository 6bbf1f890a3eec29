use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::EvalReport;
use super::interpret::InterpretReport;
use super::metrics::{confusion_matrix, roc_per_class, Metrics};
use crate::data::Mode;
use crate::error::{Error, Result};
use crate::hmm::N_STATES;

/// Written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub created_unix: u64,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            config: serde_json::to_value(config)?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        write_file(&dir.join("manifest.json"), &serde_json::to_string_pretty(self)?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn mode_name(k: usize) -> String {
    Mode::from_index(k).map_or_else(|_| format!("class{k}"), |m| m.name().to_string())
}

/// `true\pred` grid with mode names on both axes.
pub fn confusion_text(confusion: &[Vec<usize>]) -> String {
    let mut s = String::from("true\\pred");
    for k in 0..confusion.len() {
        let _ = write!(s, " {}", mode_name(k));
    }
    s.push('\n');
    for (k, row) in confusion.iter().enumerate() {
        s.push_str(&mode_name(k));
        for v in row {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

pub fn metrics_text(title: &str, m: &Metrics) -> String {
    let mut s = format!(
        "{title}\naccuracy {:.4}\nmacro_f1 {:.4}\nmacro_precision {:.4}\nmacro_recall {:.4}\n",
        m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall
    );
    s.push_str("class precision recall f1 support\n");
    for c in &m.per_class {
        let _ = writeln!(
            s,
            "{} {:.4} {:.4} {:.4} {}",
            mode_name(c.class),
            c.precision,
            c.recall,
            c.f1,
            c.support
        );
    }
    if !m.absent.is_empty() {
        let names: Vec<String> = m.absent.iter().map(|&k| mode_name(k)).collect();
        let _ = writeln!(s, "absent {}", names.join(" "));
    }
    s
}

pub fn interpret_text(r: &InterpretReport) -> String {
    let mut s = String::from("class bags attention_std accel_weight loc_weight\n");
    for k in 0..N_STATES {
        if r.bags_per_class[k] == 0 {
            continue;
        }
        let std = r.attention_std[k].unwrap_or(f64::NAN);
        let (a, l) = r.modality_weight[k].unwrap_or((f64::NAN, f64::NAN));
        let _ = writeln!(s, "{} {} {std:.4} {a:.4} {l:.4}", mode_name(k), r.bags_per_class[k]);
    }
    s.push_str("\nplacement mean_instance_weight\n");
    for (p, w) in &r.placement_weight {
        let _ = writeln!(s, "{} {w:.4}", p.name());
    }
    s
}

/// Results in the layout of the paper's result tables, mean ± std in
/// percent over runs.
pub fn table_text(r: &EvalReport) -> String {
    let mut s = format!("# {} runs={} seed={}\n", r.kind.name(), r.runs, r.seed);
    s.push_str("row accuracy f1 accuracy_hmm f1_hmm\n");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            row.row,
            row.accuracy.percent(),
            row.macro_f1.percent(),
            row.accuracy_hmm.percent(),
            row.macro_f1_hmm.percent()
        );
    }
    s
}

/// Write summary, tables, confusion matrices and ROC point files for an
/// experiment. Returns the files written.
pub fn write_report(dir: &Path, r: &EvalReport) -> Result<Vec<PathBuf>> {
    let mut out = vec![
        write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(r)?)?,
        write_file(&dir.join("table.txt"), &table_text(r))?,
    ];
    let mut auc = String::from("row class auc\n");
    for (row, p) in &r.pooled {
        for (tag, pred) in [("pre_hmm", &p.pre_hmm), ("post_hmm", &p.post_hmm)] {
            let c = confusion_matrix(pred, &p.labels, N_STATES)?;
            out.push(write_file(
                &dir.join(format!("confusion_{row}_{tag}.txt")),
                &confusion_text(&c),
            )?);
        }
        for curve in roc_per_class(&p.probs, &p.labels, N_STATES) {
            let mut s = String::from("fpr tpr\n");
            for (x, y) in &curve.points {
                let _ = writeln!(s, "{x} {y}");
            }
            let name = mode_name(curve.class);
            let _ = writeln!(auc, "{row} {name} {:.6}", curve.auc);
            out.push(write_file(&dir.join(format!("roc_{row}_{name}.txt")), &s)?);
        }
    }
    out.push(write_file(&dir.join("auc.txt"), &auc)?);
    if let Some(i) = &r.interpret {
        out.push(write_file(&dir.join("attention.txt"), &interpret_text(i))?);
    }
    out.push(Manifest::new(r.kind.name(), r.seed, &r.config)?.write(dir)?);
    Ok(out)
}
