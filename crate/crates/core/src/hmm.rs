//! Session-level smoothing of per-minute class probabilities with a
//! first-order HMM decoded by Viterbi.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Mode;
use crate::error::{Error, Result};

pub const N_STATES: usize = 8;
/// Floor applied to emission probabilities before renormalising.
pub const EMISSION_FLOOR: f64 = 1e-12;

/// Row-stochastic `P(c_m | c_{m-1})`, rows indexed by the previous mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub p: [[f64; N_STATES]; N_STATES],
}

impl TransitionMatrix {
    pub fn uniform() -> Self {
        TransitionMatrix {
            p: [[1.0 / N_STATES as f64; N_STATES]; N_STATES],
        }
    }

    /// `diag` on the diagonal, the rest spread evenly.
    pub fn sticky(diag: f64) -> Self {
        let off = (1.0 - diag) / (N_STATES - 1) as f64;
        let mut p = [[off; N_STATES]; N_STATES];
        for (i, row) in p.iter_mut().enumerate() {
            row[i] = diag;
        }
        TransitionMatrix { p }
    }

    pub fn from_rows(p: [[f64; N_STATES]; N_STATES]) -> Result<Self> {
        for (i, row) in p.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!(
                    "transition row {i} has negative or non-finite entries"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("transition row {i} sums to {s}")));
            }
        }
        Ok(TransitionMatrix { p })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("from");
        for m in Mode::ALL {
            let _ = write!(s, " {m}");
        }
        s.push('\n');
        for (m, row) in Mode::ALL.iter().zip(&self.p) {
            s.push_str(m.name());
            for v in row {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::invalid("empty transition matrix"))?
            .split_whitespace()
            .collect();
        let order: Vec<Mode> = header.iter().skip(1).map(|h| Mode::parse(h)).collect::<Result<_>>()?;
        if order.len() != N_STATES {
            return Err(Error::invalid(format!("transition header lists {} modes", order.len())));
        }
        let mut p = [[f64::NAN; N_STATES]; N_STATES];
        let mut seen = [false; N_STATES];
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != N_STATES + 1 {
                return Err(Error::invalid(format!(
                    "transition row '{line}' needs {} fields",
                    N_STATES + 1
                )));
            }
            let from = Mode::parse(f[0])?.index();
            for (k, to) in order.iter().enumerate() {
                p[from][to.index()] = f[k + 1]
                    .parse()
                    .map_err(|e| Error::invalid(format!("transition entry '{}': {e}", f[k + 1])))?;
            }
            seen[from] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("transition matrix is missing rows"));
        }
        Self::from_rows(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Bigram counts within each session plus `alpha`, row-normalised.
/// Unlabelled minutes break the chain.
pub fn estimate_transitions(sessions: &[Vec<Option<Mode>>], alpha: f64) -> Result<TransitionMatrix> {
    if sessions.iter().all(|s| s.iter().all(Option::is_none)) {
        return Err(Error::invalid("no labelled sequence to estimate transitions from"));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::config("smoothing must be a non-negative finite number"));
    }
    let mut c = [[alpha; N_STATES]; N_STATES];
    for s in sessions {
        for w in s.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                c[a.index()][b.index()] += 1.0;
            }
        }
    }
    for row in c.iter_mut() {
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            // alpha = 0 and a mode never left: fall back to uniform
            row.iter_mut().for_each(|v| *v = 1.0 / N_STATES as f64);
        } else {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(TransitionMatrix { p: c })
}

fn log_emissions(row: &[f64; N_STATES]) -> [f64; N_STATES] {
    let clamped = row.map(|v| {
        if v.is_finite() {
            v.max(EMISSION_FLOOR)
        } else {
            EMISSION_FLOOR
        }
    });
    let s: f64 = clamped.iter().sum();
    clamped.map(|v| (v / s).ln())
}

/// Most likely state path under a uniform start, emissions taken as the
/// (floored, renormalised) probability rows. Ties go to the lowest index.
pub fn viterbi(emissions: &[[f64; N_STATES]], t: &TransitionMatrix) -> Vec<usize> {
    if emissions.is_empty() {
        return Vec::new();
    }
    let log_t = t.p.map(|row| row.map(f64::ln));
    let start = -(N_STATES as f64).ln();
    let mut score = log_emissions(&emissions[0]).map(|e| e + start);
    let mut back: Vec<[usize; N_STATES]> = Vec::with_capacity(emissions.len());
    back.push([0; N_STATES]);
    for row in &emissions[1..] {
        let e = log_emissions(row);
        let mut next = [f64::NEG_INFINITY; N_STATES];
        let mut bp = [0usize; N_STATES];
        for j in 0..N_STATES {
            for i in 0..N_STATES {
                let v = score[i] + log_t[i][j];
                if v > next[j] {
                    next[j] = v;
                    bp[j] = i;
                }
            }
            next[j] += e[j];
        }
        score = next;
        back.push(bp);
    }
    let mut s = argmax_first(&score);
    let mut path = vec![0; emissions.len()];
    for k in (0..emissions.len()).rev() {
        path[k] = s;
        s = back[k][s];
    }
    path
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Joint log-probability of `path` under the decoding model.
pub fn path_log_score(emissions: &[[f64; N_STATES]], t: &TransitionMatrix, path: &[usize]) -> f64 {
    let mut s = -(N_STATES as f64).ln();
    for (k, (row, &c)) in emissions.iter().zip(path).enumerate() {
        s += log_emissions(row)[c];
        if k > 0 {
            s += t.p[path[k - 1]][c].ln();
        }
    }
    s
}

/// Decode every session independently.
pub fn smooth_sessions(sessions: &[Vec<[f64; N_STATES]>], t: &TransitionMatrix) -> Vec<Vec<usize>> {
    sessions.iter().map(|s| viterbi(s, t)).collect()
}
