//! Location preprocessing: great-circle distances, minute-grid gap filling
//! and the 12-minute speed/acceleration windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const MINUTE_MS: i64 = 60_000;
/// Missing runs shorter than this many minutes are interpolated.
pub const MAX_INTERPOLATED_GAP: usize = 2;
pub const WINDOW_SLOTS: usize = 12;
pub const SEQ_ROWS: usize = WINDOW_SLOTS - 2;
pub const N_SCALARS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in metres.
pub fn haversine(p: LatLon, q: LatLon) -> f64 {
    let (p1, p2) = (p.lat.to_radians(), q.lat.to_radians());
    let dphi = p2 - p1;
    let dl = (q.lon - p.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub t_ms: i64,
    pub pos: LatLon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocStream {
    pub session: String,
    pub fixes: Vec<Fix>,
}

impl LocStream {
    pub fn validate(&self) -> Result<()> {
        for w in self.fixes.windows(2) {
            if w[1].t_ms <= w[0].t_ms {
                return Err(Error::Data(format!(
                    "{}: location timestamps not increasing at {}",
                    self.session, w[1].t_ms
                )));
            }
        }
        if let Some(f) = self.fixes.iter().find(|f| !f.pos.is_valid()) {
            return Err(Error::Data(format!("{}: invalid coordinate {:?}", self.session, f.pos)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Observed,
    Interpolated,
    Unavailable,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    /// Seconds since the session start.
    pub t_s: f64,
    pub pos: Option<LatLon>,
    pub state: SlotState,
}

impl Slot {
    pub fn available(&self) -> bool {
        self.pos.is_some()
    }
}

/// One position per minute frame of a session.
#[derive(Clone, Debug, PartialEq)]
pub struct FilledTrack {
    pub start_ms: i64,
    pub slots: Vec<Slot>,
}

impl FilledTrack {
    pub fn availability(&self) -> f64 {
        if self.slots.is_empty() {
            return 0.0;
        }
        self.slots.iter().filter(|s| s.available()).count() as f64 / self.slots.len() as f64
    }

    /// The 12 slots ending at minute `end` (inclusive), if the session
    /// covers them.
    pub fn window(&self, end: usize) -> Option<&[Slot]> {
        (end + 1 >= WINDOW_SLOTS && end < self.slots.len()).then(|| &self.slots[end + 1 - WINDOW_SLOTS..=end])
    }
}

/// Place the first fix of every minute `[start + 60 m, start + 60 (m+1))`
/// into slot `m`, interpolate missing runs shorter than three minutes that
/// have fixes on both sides, and flag the rest unavailable.
pub fn fill_gaps(stream: &LocStream, start_ms: i64, minutes: usize) -> FilledTrack {
    let mut slots: Vec<Slot> = (0..minutes)
        .map(|m| Slot {
            t_s: (m as i64 * MINUTE_MS) as f64 / 1000.0,
            pos: None,
            state: SlotState::Unavailable,
        })
        .collect();
    for f in &stream.fixes {
        let off = f.t_ms - start_ms;
        if off < 0 {
            continue;
        }
        let m = (off / MINUTE_MS) as usize;
        if m < minutes && slots[m].state == SlotState::Unavailable {
            slots[m] = Slot {
                t_s: off as f64 / 1000.0,
                pos: Some(f.pos),
                state: SlotState::Observed,
            };
        }
    }
    let observed: Vec<usize> = (0..minutes)
        .filter(|&m| slots[m].state == SlotState::Observed)
        .collect();
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let gap = b - a - 1;
        if gap == 0 || gap > MAX_INTERPOLATED_GAP {
            continue;
        }
        let (pa, pb) = (slots[a].pos.unwrap(), slots[b].pos.unwrap());
        let (ta, tb) = (slots[a].t_s, slots[b].t_s);
        for m in a + 1..b {
            let u = (slots[m].t_s - ta) / (tb - ta);
            slots[m].pos = Some(LatLon::new(
                pa.lat + u * (pb.lat - pa.lat),
                pa.lon + u * (pb.lon - pa.lon),
            ));
            slots[m].state = SlotState::Interpolated;
        }
    }
    FilledTrack { start_ms, slots }
}

/// Speed/acceleration matrix and summary statistics of one 12-minute
/// location window. Entries that depend on an unavailable slot are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocWindow {
    /// Rows pair `v[n]` with `a[n]`, `n = 2..=11`.
    pub seq: [[f64; 2]; SEQ_ROWS],
    /// Mean and std of speed, mean and std of acceleration, movability.
    pub scalars: [f64; N_SCALARS],
    pub available: [bool; WINDOW_SLOTS],
}

impl LocWindow {
    pub fn masked() -> Self {
        LocWindow {
            seq: [[0.0; 2]; SEQ_ROWS],
            scalars: [0.0; N_SCALARS],
            available: [false; WINDOW_SLOTS],
        }
    }

    pub fn availability(&self) -> f64 {
        self.available.iter().filter(|&&a| a).count() as f64 / WINDOW_SLOTS as f64
    }

    pub fn is_masked(&self) -> bool {
        self.available.iter().filter(|&&a| a).count() < 2
    }

    pub fn movability(&self) -> f64 {
        self.scalars[4]
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn loc_features(slots: &[Slot]) -> Result<LocWindow> {
    if slots.len() != WINDOW_SLOTS {
        return Err(Error::shape(format!(
            "location window needs {WINDOW_SLOTS} slots, got {}",
            slots.len()
        )));
    }
    let mut available = [false; WINDOW_SLOTS];
    for (a, s) in available.iter_mut().zip(slots) {
        *a = s.available();
    }
    if available.iter().filter(|&&a| a).count() < 2 {
        return Ok(LocWindow {
            available,
            ..LocWindow::masked()
        });
    }
    let mut speed = [None; WINDOW_SLOTS];
    for n in 1..WINDOW_SLOTS {
        if let (Some(p), Some(q)) = (slots[n - 1].pos, slots[n].pos) {
            let dt = slots[n].t_s - slots[n - 1].t_s;
            if dt > 0.0 {
                speed[n] = Some(haversine(p, q) / dt);
            }
        }
    }
    let mut accel = [None; WINDOW_SLOTS];
    for n in 2..WINDOW_SLOTS {
        if let (Some(v1), Some(v0)) = (speed[n], speed[n - 1]) {
            accel[n] = Some((v1 - v0) / (slots[n].t_s - slots[n - 1].t_s));
        }
    }
    let mut seq = [[0.0; 2]; SEQ_ROWS];
    for (r, row) in seq.iter_mut().enumerate() {
        let n = r + 2;
        *row = [speed[n].unwrap_or(0.0), accel[n].unwrap_or(0.0)];
    }
    let speeds: Vec<f64> = speed.iter().flatten().copied().collect();
    let accels: Vec<f64> = accel.iter().flatten().copied().collect();
    let (vm, vs) = mean_std(&speeds);
    let (am, as_) = mean_std(&accels);
    let pts: Vec<LatLon> = slots.iter().filter_map(|s| s.pos).collect();
    let path: f64 = pts.windows(2).map(|w| haversine(w[0], w[1])).sum();
    let movability = if path > 0.0 {
        (haversine(pts[0], *pts.last().unwrap()) / path).min(1.0)
    } else {
        0.0
    };
    Ok(LocWindow {
        seq,
        scalars: [vm, vs, am, as_, movability],
        available,
    })
}
