//! Reading and writing sessions in the SHL preview text layout:
//! `<root>/<user>/<day>/{Label.txt, <Placement>_Motion.txt,
//! <Placement>_Location.txt}` with whitespace separated columns.
//! Column positions are configurable for other columnar text sources.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{Mode, Placement, Session};
use crate::accel::{decimate, AccelStream, ACCEL_RATE_HZ};
use crate::error::{Error, Result};
use crate::geo::{fill_gaps, Fix, LatLon, LocStream, MINUTE_MS, WINDOW_SLOTS};

/// Zero-based column positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    /// `None` splits on whitespace.
    pub delimiter: Option<char>,
    pub time: usize,
    pub acc: [usize; 3],
    pub lat: usize,
    pub lon: usize,
    pub label: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            delimiter: None,
            time: 0,
            acc: [1, 2, 3],
            lat: 4,
            lon: 5,
            label: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Sampling rate of the motion files.
    pub source_rate_hz: f64,
    /// Anti-alias cutoff as a fraction of the output Nyquist rate.
    pub cutoff: f64,
    /// Location file preference; the first present one is used.
    pub location_order: Vec<Placement>,
    pub columns: ColumnMap,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            source_rate_hz: 100.0,
            cutoff: 0.8,
            location_order: vec![Placement::Hips, Placement::Torso, Placement::Bag, Placement::Hand],
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sessions: usize,
    /// Complete one-minute accel frames per placement.
    pub frames: BTreeMap<String, usize>,
    pub labels: usize,
    /// Target minutes whose 12-minute location window is not masked.
    pub location_windows: usize,
    pub missing_files: Vec<String>,
    pub skipped: Vec<String>,
}

impl IngestReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} sessions, {} labelled minutes, {} location windows\n",
            self.sessions, self.labels, self.location_windows
        );
        for (p, n) in &self.frames {
            let _ = writeln!(s, "  {p}: {n} frames");
        }
        for m in &self.missing_files {
            let _ = writeln!(s, "  missing {m}");
        }
        for m in &self.skipped {
            let _ = writeln!(s, "  skipped {m}");
        }
        s
    }

    fn add(&mut self, s: &Session) {
        self.sessions += 1;
        self.labels += s.labelled_minutes();
        for (p, stream) in &s.accel {
            let per = stream.samples_per_minute();
            let n = (0..stream.minutes())
                .filter(|&m| stream.span_complete(m * per, per))
                .count();
            *self.frames.entry(p.name().to_string()).or_default() += n;
        }
        let track = fill_gaps(&s.location, s.start_ms, s.minutes());
        self.location_windows += (WINDOW_SLOTS - 1..s.minutes())
            .filter(|&m| s.labels[m].is_some() && track.window(m).is_some())
            .filter(|&m| {
                track.slots[m + 1 - WINDOW_SLOTS..=m]
                    .iter()
                    .filter(|x| x.available())
                    .count()
                    >= 2
            })
            .count();
    }
}

fn read_rows(path: &Path, cols: &ColumnMap, need: &[usize]) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let width = need.iter().copied().max().unwrap_or(0) + 1;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = match cols.delimiter {
            None => line.split_whitespace().collect(),
            Some(d) => line.split(d).map(str::trim).collect(),
        };
        if fields.len() < width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: format!("expected at least {width} columns, found {}", fields.len()),
            });
        }
        let row = need
            .iter()
            .map(|&c| {
                let f = fields[c];
                if f.eq_ignore_ascii_case("nan") {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: ln + 1,
                        msg: format!("column {c}: {e}"),
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Majority label per minute; ties go to the mode seen first in the frame.
/// Code 0 (null) takes part in the vote and yields `None`.
fn minute_labels(rows: &[Vec<f64>], start_ms: i64, minutes: usize) -> Vec<Option<Mode>> {
    let mut votes: Vec<Vec<(u32, usize)>> = vec![Vec::new(); minutes];
    for r in rows {
        let m = ((r[0] as i64 - start_ms) / MINUTE_MS) as usize;
        if m >= minutes || r[1].is_nan() {
            continue;
        }
        let code = r[1] as u32;
        let v = &mut votes[m];
        match v.iter_mut().find(|(c, _)| *c == code) {
            Some(e) => e.1 += 1,
            None => v.push((code, 1)),
        }
    }
    votes
        .iter()
        .map(|v| {
            let mut best: Option<(u32, usize)> = None;
            for &(c, n) in v {
                if best.is_none_or(|(_, bn)| n > bn) {
                    best = Some((c, n));
                }
            }
            best.and_then(|(c, _)| Mode::from_shl(c))
        })
        .collect()
}

fn read_motion(path: &Path, cfg: &IngestConfig, start_ms: i64, minutes: usize) -> Result<Vec<[f64; 3]>> {
    let c = &cfg.columns;
    let rows = read_rows(path, c, &[c.time, c.acc[0], c.acc[1], c.acc[2]])?;
    let n = (minutes as f64 * 60.0 * cfg.source_rate_hz).round() as usize;
    let mut grid = vec![[f64::NAN; 3]; n];
    for r in rows {
        let idx = ((r[0] - start_ms as f64) * cfg.source_rate_hz / 1000.0).round();
        if idx >= 0.0 && (idx as usize) < n {
            grid[idx as usize] = [r[1], r[2], r[3]];
        }
    }
    let factor = (cfg.source_rate_hz / ACCEL_RATE_HZ).round() as usize;
    if (factor as f64 * ACCEL_RATE_HZ - cfg.source_rate_hz).abs() > 1e-9 || factor == 0 {
        return Err(Error::config(format!(
            "source rate {} Hz is not a multiple of {ACCEL_RATE_HZ} Hz",
            cfg.source_rate_hz
        )));
    }
    Ok(decimate(&grid, factor, cfg.cutoff))
}

/// First valid fix of every minute slot.
fn read_location(path: &Path, cfg: &IngestConfig, session: &str, start_ms: i64) -> Result<LocStream> {
    let c = &cfg.columns;
    let rows = read_rows(path, c, &[c.time, c.lat, c.lon])?;
    let mut fixes: Vec<Fix> = Vec::new();
    let mut last_slot = i64::MIN;
    for r in rows {
        let t = r[0] as i64;
        let pos = LatLon::new(r[1], r[2]);
        if t < start_ms || !pos.is_valid() {
            continue;
        }
        let slot = (t - start_ms) / MINUTE_MS;
        if slot > last_slot {
            fixes.push(Fix { t_ms: t, pos });
            last_slot = slot;
        }
    }
    fixes.sort_by_key(|f| f.t_ms);
    Ok(LocStream {
        session: session.to_string(),
        fixes,
    })
}

fn sorted_dirs(p: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(p)
        .map_err(|e| Error::io(p, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// One `<user>/<day>` directory.
pub fn ingest_session(
    dir: &Path,
    user: &str,
    day: &str,
    cfg: &IngestConfig,
    report: &mut IngestReport,
) -> Result<Option<Session>> {
    let label_path = dir.join("Label.txt");
    if !label_path.is_file() {
        report.skipped.push(format!("{user}/{day}: no Label.txt"));
        return Ok(None);
    }
    let c = &cfg.columns;
    let label_rows = read_rows(&label_path, c, &[c.time, c.label])?;
    let Some(first) = label_rows.first() else {
        report.skipped.push(format!("{user}/{day}: empty Label.txt"));
        return Ok(None);
    };
    let start_ms = first[0] as i64;
    let last_ms = label_rows.iter().map(|r| r[0] as i64).max().unwrap_or(start_ms);
    let minutes = ((last_ms - start_ms) / MINUTE_MS + 1) as usize;
    let labels = minute_labels(&label_rows, start_ms, minutes);
    let id = format!("{user}/{day}");

    let motion_files: Vec<(Placement, PathBuf)> = Placement::ALL
        .iter()
        .map(|&p| (p, dir.join(format!("{}_Motion.txt", p.name()))))
        .collect();
    let loaded: Vec<(Placement, Option<Result<Vec<[f64; 3]>>>)> = std::thread::scope(|s| {
        let handles: Vec<_> = motion_files
            .iter()
            .map(|(p, path)| {
                let p = *p;
                s.spawn(move || (p, path.is_file().then(|| read_motion(path, cfg, start_ms, minutes))))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("reader thread panicked"))
            .collect()
    });
    let mut accel = BTreeMap::new();
    let mut missing = Vec::new();
    for (p, got) in loaded {
        match got {
            None => {
                missing.push(p);
                report.missing_files.push(format!("{id}/{}_Motion.txt", p.name()));
            }
            Some(samples) => {
                accel.insert(
                    p,
                    AccelStream {
                        session: id.clone(),
                        placement: p,
                        rate_hz: ACCEL_RATE_HZ,
                        start_ms,
                        samples: samples?,
                    },
                );
            }
        }
    }
    let location = match cfg
        .location_order
        .iter()
        .map(|p| dir.join(format!("{}_Location.txt", p.name())))
        .find(|p| p.is_file())
    {
        Some(path) => read_location(&path, cfg, &id, start_ms)?,
        None => {
            report.missing_files.push(format!("{id}/*_Location.txt"));
            LocStream {
                session: id.clone(),
                fixes: Vec::new(),
            }
        }
    };
    Ok(Some(Session {
        user: user.to_string(),
        day: day.to_string(),
        start_ms,
        accel,
        missing,
        location,
        labels,
    }))
}

/// All sessions below `root`. An empty tree is an error carrying the report.
pub fn ingest(root: &Path, cfg: &IngestConfig) -> Result<(Vec<Session>, IngestReport)> {
    let mut report = IngestReport::default();
    let mut sessions = Vec::new();
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    for udir in sorted_dirs(root)? {
        for ddir in sorted_dirs(&udir)? {
            if let Some(s) = ingest_session(&ddir, &name_of(&udir), &name_of(&ddir), cfg, &mut report)? {
                report.add(&s);
                sessions.push(s);
            }
        }
    }
    if sessions.is_empty() {
        return Err(Error::Data(format!(
            "no sessions found under {}\n{}",
            root.display(),
            report.summary()
        )));
    }
    Ok((sessions, report))
}

/// Write sessions in the same layout at their stored rate, one label row
/// per minute. Reading the result back with [`written_config`] reproduces
/// the sessions.
pub fn write_sessions(root: &Path, sessions: &[Session]) -> Result<()> {
    for s in sessions {
        let dir = root.join(&s.user).join(&s.day);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = String::new();
        for (m, l) in s.labels.iter().enumerate() {
            let code = l.map_or(0, |l| l.index() + 1);
            let _ = writeln!(out, "{} {code}", s.start_ms + m as i64 * MINUTE_MS);
        }
        write(&dir.join("Label.txt"), &out)?;
        for (p, stream) in &s.accel {
            let mut out = String::new();
            for (i, v) in stream.samples.iter().enumerate() {
                if v.iter().all(|x| x.is_finite()) {
                    let t = stream.start_ms as f64 + i as f64 * 1000.0 / stream.rate_hz;
                    let _ = writeln!(out, "{t} {} {} {}", v[0], v[1], v[2]);
                }
            }
            write(&dir.join(format!("{}_Motion.txt", p.name())), &out)?;
        }
        let mut out = String::new();
        for f in &s.location.fixes {
            let _ = writeln!(out, "{} 0 0 0 {} {} 0", f.t_ms, f.pos.lat, f.pos.lon);
        }
        write(&dir.join("Hips_Location.txt"), &out)?;
    }
    Ok(())
}

/// Ingest settings matching [`write_sessions`] output.
pub fn written_config() -> IngestConfig {
    IngestConfig {
        source_rate_hz: ACCEL_RATE_HZ,
        ..IngestConfig::default()
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
