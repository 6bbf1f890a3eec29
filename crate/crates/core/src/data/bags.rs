use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mixed::VirtualStream;
use super::types::{Mode, Placement, Session};
use crate::accel::{self, apply_masks, draw_masks, AccelSpectrogram, MaskConfig, SpectrogramConfig, Spectrogrammer};
use crate::error::{Error, Result};
use crate::geo::{fill_gaps, loc_features, LocWindow, N_SCALARS, SEQ_ROWS, WINDOW_SLOTS};
use crate::model::{BatchInput, ModelConfig};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagConfig {
    /// One-minute accel instances per bag.
    pub accel_instances: usize,
    /// Also compute one spectrogram over this many minutes per bag.
    pub wide_minutes: Option<usize>,
    pub spectrogram: SpectrogramConfig,
    /// Skip targets without a full 12-minute location history.
    pub require_location: bool,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig {
            accel_instances: 3,
            wide_minutes: None,
            spectrogram: SpectrogramConfig::default(),
            require_location: true,
        }
    }
}

/// Which accel placement feeds each bag.
#[derive(Clone, Debug)]
pub enum PlacementPolicy {
    One(Placement),
    /// One bag per target minute for every placement present.
    Each,
    /// Per-minute placements from virtual streams, matched to sessions by id.
    Virtual(Vec<VirtualStream>),
}

/// Identity of a cached accel window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameKey {
    pub session: usize,
    pub placement: Placement,
    pub minute: usize,
    pub minutes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub session: usize,
    pub user: String,
    pub target: usize,
    pub label: Mode,
    /// Indices into `BagDataset::frames`, oldest first.
    pub instances: Vec<usize>,
    pub placements: Vec<Placement>,
    pub wide: Option<usize>,
    /// Index into `BagDataset::loc_windows`; `None` when location was not
    /// required and no window exists.
    pub loc: Option<usize>,
    /// Virtual stream number (0 outside mixed runs).
    pub stream: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionInfo {
    pub id: String,
    pub user: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BagDataset {
    pub sessions: Vec<SessionInfo>,
    pub frames: Vec<FrameKey>,
    pub spectrograms: Vec<Tensor>,
    pub loc_keys: Vec<(usize, usize)>,
    pub loc_windows: Vec<LocWindow>,
    pub bags: Vec<Bag>,
}

struct Builder<'a> {
    cfg: &'a BagConfig,
    spec: Spectrogrammer,
    frame_index: HashMap<FrameKey, Option<usize>>,
    loc_index: HashMap<(usize, usize), usize>,
    out: BagDataset,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a BagConfig) -> Result<Self> {
        Ok(Builder {
            cfg,
            spec: Spectrogrammer::new(cfg.spectrogram.clone())?,
            frame_index: HashMap::new(),
            loc_index: HashMap::new(),
            out: BagDataset::default(),
        })
    }

    fn frame(&mut self, s: &Session, key: FrameKey) -> Result<Option<usize>> {
        if let Some(&v) = self.frame_index.get(&key) {
            return Ok(v);
        }
        let got = match s.accel.get(&key.placement) {
            None => None,
            Some(stream) => {
                let per = stream.samples_per_minute();
                match accel::magnitude_jerk_span(stream, key.minute * per, key.minutes * per) {
                    Ok(w) => {
                        // the hop adapts to the window length
                        let AccelSpectrogram { values, .. } = self.spec.spectrogram(&w)?;
                        self.out.frames.push(key);
                        self.out.spectrograms.push(values);
                        Some(self.out.frames.len() - 1)
                    }
                    Err(Error::Data(_)) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        self.frame_index.insert(key, got);
        Ok(got)
    }

    fn add_session(
        &mut self,
        s: &Session,
        si: usize,
        placements: &[Vec<Placement>],
        virtual_streams: bool,
    ) -> Result<()> {
        let cfg = self.cfg;
        let n_a = cfg.accel_instances;
        let track = fill_gaps(&s.location, s.start_ms, s.minutes());
        let first = if cfg.require_location { WINDOW_SLOTS - 1 } else { 0 }
            .max(n_a.saturating_sub(1))
            .max(cfg.wide_minutes.unwrap_or(1) - 1);
        for (stream, per_minute) in placements.iter().enumerate() {
            for m in first..s.minutes() {
                let Some(label) = s.labels[m] else { continue };
                let mut instances = Vec::with_capacity(n_a);
                let mut used = Vec::with_capacity(n_a);
                for k in m + 1 - n_a..=m {
                    let key = FrameKey {
                        session: si,
                        placement: per_minute[k],
                        minute: k,
                        minutes: 1,
                    };
                    match self.frame(s, key)? {
                        Some(i) => {
                            instances.push(i);
                            used.push(per_minute[k]);
                        }
                        None => break,
                    }
                }
                if instances.len() != n_a {
                    continue;
                }
                let wide = match cfg.wide_minutes {
                    Some(d) => {
                        let key = FrameKey {
                            session: si,
                            placement: per_minute[m],
                            minute: m + 1 - d,
                            minutes: d,
                        };
                        match self.frame(s, key)? {
                            Some(i) => Some(i),
                            None => continue,
                        }
                    }
                    None => None,
                };
                let loc = match track.window(m) {
                    Some(slots) => Some(match self.loc_index.get(&(si, m)) {
                        Some(&i) => i,
                        None => {
                            self.out.loc_keys.push((si, m));
                            self.out.loc_windows.push(loc_features(slots)?);
                            let i = self.out.loc_windows.len() - 1;
                            self.loc_index.insert((si, m), i);
                            i
                        }
                    }),
                    None => None,
                };
                self.out.bags.push(Bag {
                    session: si,
                    user: s.user.clone(),
                    target: m,
                    label,
                    instances,
                    placements: used,
                    wide,
                    loc,
                    stream: if virtual_streams { stream } else { 0 },
                });
            }
        }
        Ok(())
    }
}

fn session_placements(s: &Session, policy: &PlacementPolicy) -> Result<Vec<Vec<Placement>>> {
    let n = s.minutes();
    Ok(match policy {
        PlacementPolicy::One(p) => {
            if s.accel.contains_key(p) {
                vec![vec![*p; n]]
            } else {
                Vec::new()
            }
        }
        PlacementPolicy::Each => s.placements().into_iter().map(|p| vec![p; n]).collect(),
        PlacementPolicy::Virtual(streams) => {
            let id = s.id();
            let mine: Vec<Vec<Placement>> = streams
                .iter()
                .filter(|v| v.session == id)
                .map(|v| v.placements.clone())
                .collect();
            if mine.iter().any(|p| p.len() != n) {
                return Err(Error::invalid(format!(
                    "virtual stream for {id} does not cover {n} minutes"
                )));
            }
            mine
        }
    })
}

/// Bags of one session, targets in time order.
pub fn build_bags(session: &Session, policy: &PlacementPolicy, cfg: &BagConfig) -> Result<BagDataset> {
    BagDataset::build(std::slice::from_ref(session), policy, cfg)
}

impl BagDataset {
    pub fn build(sessions: &[Session], policy: &PlacementPolicy, cfg: &BagConfig) -> Result<Self> {
        if cfg.accel_instances == 0 {
            return Err(Error::config("bags need at least one accel instance"));
        }
        let mut b = Builder::new(cfg)?;
        for (si, s) in sessions.iter().enumerate() {
            b.out.sessions.push(SessionInfo {
                id: s.id(),
                user: s.user.clone(),
            });
            let placements = session_placements(s, policy)?;
            b.add_session(s, si, &placements, matches!(policy, PlacementPolicy::Virtual(_)))?;
        }
        Ok(b.out)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.bags[i].label.index()).collect()
    }

    pub fn indices_where(&self, f: impl Fn(&Bag) -> bool) -> Vec<usize> {
        (0..self.bags.len()).filter(|&i| f(&self.bags[i])).collect()
    }

    pub fn loc_window(&self, bag: &Bag) -> LocWindow {
        bag.loc
            .map(|i| self.loc_windows[i].clone())
            .unwrap_or_else(LocWindow::masked)
    }

    fn spectrogram<R: Rng + ?Sized>(&self, frame: usize, mask: Option<(&MaskConfig, &mut R)>) -> Tensor {
        let t = &self.spectrograms[frame];
        match mask {
            None => t.clone(),
            Some((cfg, rng)) => {
                let s = t.shape();
                let draw = draw_masks(rng, cfg, s[0], s[1]);
                apply_masks(
                    &AccelSpectrogram {
                        values: t.clone(),
                        start: 0,
                    },
                    &draw,
                )
                .values
            }
        }
    }

    /// Model inputs and labels for bags `idx`. With `augment`, every
    /// spectrogram gets fresh masks.
    pub fn batch<R: Rng>(
        &self,
        idx: &[usize],
        model: &ModelConfig,
        mut augment: Option<(&MaskConfig, &mut R)>,
    ) -> Result<(BatchInput, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let arch = model.architecture;
        let n = model.accel_instances();
        let accel = if arch.uses_accel() {
            let mut frames: Vec<Tensor> = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                let bag = &self.bags[i];
                let chosen: Vec<usize> = if arch.uses_wide_window() {
                    if model.accel_minutes == 1 {
                        vec![*bag.instances.last().unwrap()]
                    } else {
                        let w = bag
                            .wide
                            .ok_or_else(|| Error::invalid(format!("{arch} needs wide accel windows in the dataset")))?;
                        if self.frames[w].minutes != model.accel_minutes {
                            return Err(Error::config(format!(
                                "dataset wide windows span {} minutes, model expects {}",
                                self.frames[w].minutes, model.accel_minutes
                            )));
                        }
                        vec![w]
                    }
                } else {
                    if bag.instances.len() != n {
                        return Err(Error::config(format!(
                            "bags carry {} accel instances, model expects {n}",
                            bag.instances.len()
                        )));
                    }
                    bag.instances.clone()
                };
                for f in chosen {
                    let t = match augment.as_mut() {
                        Some((cfg, rng)) => self.spectrogram(f, Some((*cfg, &mut **rng))),
                        None => self.spectrogram::<R>(f, None),
                    };
                    frames.push(t);
                }
            }
            let refs: Vec<&Tensor> = frames.iter().collect();
            Some(Tensor::stack(&refs)?)
        } else {
            None
        };
        let (loc_seq, loc_scalars) = if arch.uses_location() {
            let mut seq = Vec::with_capacity(idx.len() * SEQ_ROWS * 2);
            let mut sc = Vec::with_capacity(idx.len() * N_SCALARS);
            for &i in idx {
                let w = self.loc_window(&self.bags[i]);
                seq.extend(w.seq.iter().flatten());
                sc.extend_from_slice(&w.scalars);
            }
            (
                Some(Tensor::new(vec![idx.len(), SEQ_ROWS, 2], seq)?),
                Some(Tensor::new(vec![idx.len(), N_SCALARS], sc)?),
            )
        } else {
            (None, None)
        };
        Ok((
            BatchInput {
                bags: idx.len(),
                accel,
                accel_instances: n,
                loc_seq,
                loc_scalars,
            },
            self.labels(idx),
        ))
    }
}
