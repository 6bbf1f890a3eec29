use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::types::{Mode, Placement, Session};
use crate::accel::{AccelStream, ACCEL_RATE_HZ};
use crate::error::{Error, Result};
use crate::geo::{Fix, LatLon, LocStream, EARTH_RADIUS_M, MINUTE_MS};

/// Signal template of one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTemplate {
    pub mode: Mode,
    /// Gait frequency; 0 for none.
    pub periodic_hz: f64,
    pub amplitude: f64,
    /// Slow vehicle sway.
    pub drift_hz: f64,
    pub drift_amplitude: f64,
    /// Per-axis white-noise standard deviation.
    pub noise: f64,
    /// Ground speed range in m/s.
    pub speed: (f64, f64),
}

impl ModeTemplate {
    pub fn default_for(mode: Mode) -> Self {
        let t = |periodic_hz, amplitude, drift_hz, drift_amplitude, noise, speed| ModeTemplate {
            mode,
            periodic_hz,
            amplitude,
            drift_hz,
            drift_amplitude,
            noise,
            speed,
        };
        match mode {
            Mode::Still => t(0.0, 0.0, 0.0, 0.0, 0.03, (0.0, 0.0)),
            Mode::Walk => t(2.0, 2.5, 0.0, 0.0, 0.3, (1.0, 1.8)),
            Mode::Run => t(3.0, 7.0, 0.0, 0.0, 0.6, (2.5, 4.5)),
            Mode::Bike => t(1.3, 1.5, 0.0, 0.0, 0.5, (3.5, 7.0)),
            Mode::Car => t(0.0, 0.0, 0.2, 0.6, 0.25, (8.0, 25.0)),
            Mode::Bus => t(0.0, 0.0, 0.15, 0.8, 0.3, (4.0, 12.0)),
            Mode::Train => t(0.0, 0.0, 0.1, 0.3, 0.15, (20.0, 45.0)),
            Mode::Subway => t(0.0, 0.0, 0.3, 0.5, 0.2, (10.0, 25.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub sessions_per_user: usize,
    pub minutes_per_session: usize,
    pub templates: Vec<ModeTemplate>,
    pub placements: Vec<Placement>,
    /// Inclusive range of single-mode run lengths in minutes.
    pub dwell_minutes: (usize, usize),
    /// Probability that a minute's location fix is present.
    pub location_availability: f64,
    /// Relative per-user spread of amplitude (and half of it for frequency).
    pub user_variation: f64,
    pub origin: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 3,
            sessions_per_user: 2,
            minutes_per_session: 120,
            templates: [Mode::Still, Mode::Walk, Mode::Run, Mode::Car]
                .map(ModeTemplate::default_for)
                .to_vec(),
            placements: vec![Placement::Hips],
            dwell_minutes: (8, 30),
            location_availability: 0.9,
            user_variation: 0.15,
            origin: (50.83, -0.13),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.sessions_per_user == 0 || self.minutes_per_session == 0 {
            return Err(Error::config("synthetic dataset needs users, sessions and minutes"));
        }
        if self.templates.is_empty() || self.placements.is_empty() {
            return Err(Error::config("synthetic dataset needs modes and placements"));
        }
        if self.dwell_minutes.0 == 0 || self.dwell_minutes.0 > self.dwell_minutes.1 {
            return Err(Error::config("invalid dwell range"));
        }
        if !(0.0..=1.0).contains(&self.location_availability) {
            return Err(Error::config("location availability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Generated sessions plus the ground-truth ground speed of every minute.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub sessions: Vec<Session>,
    pub speeds: Vec<Vec<f64>>,
}

fn placement_gain(p: Placement) -> f64 {
    match p {
        Placement::Bag => 0.7,
        Placement::Hand => 1.15,
        Placement::Hips => 1.0,
        Placement::Torso => 0.85,
    }
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    // a random unit quaternion
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut q: [f64; 4] = [n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng)];
    let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= len);
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Point reached after `dist` metres on bearing `bearing` (radians).
pub fn destination(p: LatLon, bearing: f64, dist: f64) -> LatLon {
    if dist == 0.0 {
        return p;
    }
    let d = dist / EARTH_RADIUS_M;
    let (phi, lam) = (p.lat.to_radians(), p.lon.to_radians());
    let phi2 = (phi.sin() * d.cos() + phi.cos() * d.sin() * bearing.cos()).asin();
    let lam2 = lam + (bearing.sin() * d.sin() * phi.cos()).atan2(d.cos() - phi.sin() * phi2.sin());
    let mut lon = lam2.to_degrees();
    lon = (lon + 540.0) % 360.0 - 180.0;
    LatLon::new(phi2.to_degrees(), lon)
}

struct Run {
    template: usize,
    len: usize,
    speed: f64,
    axis: [f64; 3],
    phase: [f64; 3],
}

pub fn synth_generate<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthOutput> {
    cfg.validate()?;
    let per_min = (ACCEL_RATE_HZ * 60.0) as usize;
    let fs = ACCEL_RATE_HZ;
    let mut sessions = Vec::new();
    let mut speeds = Vec::new();
    for u in 0..cfg.users {
        let v = cfg.user_variation;
        let amp_scale = 1.0 + rng.random_range(-v..=v);
        let freq_scale = 1.0 + rng.random_range(-v / 2.0..=v / 2.0);
        for d in 0..cfg.sessions_per_user {
            let minutes = cfg.minutes_per_session;
            // mode runs
            let mut runs: Vec<Run> = Vec::new();
            let mut covered = 0;
            let mut prev: Option<usize> = None;
            while covered < minutes {
                let template = if cfg.templates.len() == 1 {
                    0
                } else {
                    loop {
                        let t = rng.random_range(0..cfg.templates.len());
                        if Some(t) != prev {
                            break t;
                        }
                    }
                };
                let len = rng
                    .random_range(cfg.dwell_minutes.0..=cfg.dwell_minutes.1)
                    .min(minutes - covered);
                let (lo, hi) = cfg.templates[template].speed;
                let speed = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                // body motion is mostly vertical in the device-upright frame
                let u: [f64; 3] = UnitSphere.sample(rng);
                let norm = (u[0] * u[0] + u[1] * u[1] + (u[2] + 3.0).powi(2)).sqrt();
                let axis = [u[0] / norm, u[1] / norm, (u[2] + 3.0) / norm];
                let phase = [
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..2.0 * PI),
                ];
                runs.push(Run {
                    template,
                    len,
                    speed,
                    axis,
                    phase,
                });
                covered += len;
                prev = Some(template);
            }
            let mut labels = Vec::with_capacity(minutes);
            let mut minute_run = Vec::with_capacity(minutes);
            for (ri, r) in runs.iter().enumerate() {
                for _ in 0..r.len {
                    labels.push(Some(cfg.templates[r.template].mode));
                    minute_run.push(ri);
                }
            }
            let start_ms = ((u * cfg.sessions_per_user + d) as i64) * 86_400_000;
            let id = format!("user{u}/day{d}");
            let mut accel = BTreeMap::new();
            for &p in &cfg.placements {
                let rot = random_rotation(rng);
                let gain = placement_gain(p) * amp_scale;
                let mut samples = Vec::with_capacity(minutes * per_min);
                for n in 0..minutes * per_min {
                    let r = &runs[minute_run[n / per_min]];
                    let tpl = &cfg.templates[r.template];
                    let t = n as f64 / fs;
                    let f = tpl.periodic_hz * freq_scale;
                    let mut body = 0.0;
                    if f > 0.0 {
                        body += tpl.amplitude
                            * gain
                            * ((2.0 * PI * f * t + r.phase[0]).sin() + 0.3 * (4.0 * PI * f * t + r.phase[1]).sin());
                    }
                    if tpl.drift_hz > 0.0 {
                        body += tpl.drift_amplitude * gain * (2.0 * PI * tpl.drift_hz * t + r.phase[2]).sin();
                    }
                    let noise = Normal::new(0.0, tpl.noise.max(1e-12)).unwrap();
                    let local = [
                        body * r.axis[0] + noise.sample(rng),
                        body * r.axis[1] + noise.sample(rng),
                        9.81 + body * r.axis[2] + noise.sample(rng),
                    ];
                    samples.push(rotate(&rot, local));
                }
                accel.insert(
                    p,
                    AccelStream {
                        session: id.clone(),
                        placement: p,
                        rate_hz: fs,
                        start_ms,
                        samples,
                    },
                );
            }
            // location: fix m at start + 60 m s, segment m-1 -> m at minute m's speed
            let mut pos = LatLon::new(
                cfg.origin.0 + rng.random_range(-0.05..0.05),
                cfg.origin.1 + rng.random_range(-0.05..0.05),
            );
            let mut bearing = rng.random_range(0.0..2.0 * PI);
            let mut fixes = Vec::new();
            let mut sp = Vec::with_capacity(minutes);
            for m in 0..minutes {
                let speed = runs[minute_run[m]].speed;
                sp.push(speed);
                if m > 0 {
                    bearing += rng.random_range(-0.2..0.2);
                    pos = destination(pos, bearing, speed * 60.0);
                }
                if rng.random::<f64>() < cfg.location_availability {
                    fixes.push(Fix {
                        t_ms: start_ms + m as i64 * MINUTE_MS,
                        pos,
                    });
                }
            }
            sessions.push(Session {
                user: format!("user{u}"),
                day: format!("day{d}"),
                start_ms,
                accel,
                missing: Vec::new(),
                location: LocStream { session: id, fixes },
                labels,
            });
            speeds.push(sp);
        }
    }
    Ok(SynthOutput { sessions, speeds })
}
