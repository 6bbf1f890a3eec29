use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bags::BagDataset;
use super::types::{Mode, Session};
use crate::error::{Error, Result};
use crate::geo::WINDOW_SLOTS;

/// Contiguous single-label run of minutes `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Stream {
    pub session: String,
    pub user: String,
    pub start: usize,
    pub end: usize,
    pub label: Mode,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub max_stream_minutes: usize,
    pub validation_fraction: f64,
    /// Minutes before this index host no bag and are left out of streams.
    pub first_target: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            max_stream_minutes: 30,
            validation_fraction: 0.2,
            first_target: WINDOW_SLOTS - 1,
        }
    }
}

/// Maximal single-label runs from minute `first` on, cut into pieces of at
/// most `max_len`.
pub fn label_streams(sessions: &[Session], first: usize, max_len: usize) -> Vec<Stream> {
    let max_len = max_len.max(1);
    let mut out = Vec::new();
    for s in sessions {
        let mut m = first;
        while m < s.minutes() {
            let Some(label) = s.labels[m] else {
                m += 1;
                continue;
            };
            let mut end = m + 1;
            while end < s.minutes() && s.labels[end] == Some(label) && end - m < max_len {
                end += 1;
            }
            out.push(Stream {
                session: s.id(),
                user: s.user.clone(),
                start: m,
                end,
                label,
            });
            m = end;
        }
    }
    out
}

/// Per `(user, class)` group, the subset of streams whose total length is
/// closest to `fraction` of the group goes to validation. Streams are
/// considered in seeded random order, which picks among equally close
/// subsets.
pub fn stratified_split(streams: &[Stream], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<Stream>, Vec<Stream>) {
    let mut groups: BTreeMap<(String, Mode), Vec<Stream>> = BTreeMap::new();
    for s in streams {
        groups.entry((s.user.clone(), s.label)).or_default().push(s.clone());
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut group) in groups {
        group.shuffle(rng);
        let pick = closest_subset(&group.iter().map(Stream::len).collect::<Vec<_>>(), fraction);
        for (s, v) in group.into_iter().zip(pick) {
            if v {
                val.push(s);
            } else {
                train.push(s);
            }
        }
    }
    train.sort();
    val.sort();
    (train, val)
}

/// 0/1 subset-sum: membership flags of a subset whose sum is closest to
/// `fraction * total`; the first reaching path wins ties.
fn closest_subset(lens: &[usize], fraction: f64) -> Vec<bool> {
    let total: usize = lens.iter().sum();
    let target = fraction * total as f64;
    // via[k][s]: sum s first became reachable when item k was added
    let mut reach = vec![false; total + 1];
    reach[0] = true;
    let mut via: Vec<Vec<bool>> = Vec::with_capacity(lens.len());
    for &l in lens {
        let mut added = vec![false; total + 1];
        for s in (l..=total).rev() {
            if !reach[s] && reach[s - l] {
                reach[s] = true;
                added[s] = true;
            }
        }
        via.push(added);
    }
    let best = (0..=total)
        .filter(|&s| reach[s])
        .min_by(|&a, &b| (a as f64 - target).abs().total_cmp(&(b as f64 - target).abs()))
        .unwrap_or(0);
    let mut pick = vec![false; lens.len()];
    let mut s = best;
    for k in (0..lens.len()).rev() {
        if s > 0 && via[k][s] {
            pick[k] = true;
            s -= lens[k];
        }
    }
    debug_assert_eq!(s, 0);
    pick
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_user: String,
    pub train: Vec<Stream>,
    pub validation: Vec<Stream>,
    pub seed: u64,
}

/// Bag indices of one fold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FoldIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Development bags dropped because their accel windows overlap a
    /// validation bag's.
    pub purged: usize,
}

/// Minutes covered by the accel windows of bag `i`, as `(session, minute)`.
pub fn bag_minutes(ds: &BagDataset, i: usize) -> Vec<(usize, usize)> {
    let bag = &ds.bags[i];
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &f in bag.instances.iter().chain(bag.wide.iter()) {
        let k = ds.frames[f];
        out.extend((k.minute..k.minute + k.minutes).map(|m| (k.session, m)));
    }
    out.sort_unstable();
    out.dedup();
    out
}

impl SplitSpec {
    pub fn assign(&self, ds: &BagDataset) -> FoldIndices {
        fn index(streams: &[Stream]) -> HashMap<&str, Vec<(usize, usize)>> {
            let mut by: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
            for s in streams {
                by.entry(s.session.as_str()).or_default().push((s.start, s.end));
            }
            by
        }
        let tr = index(&self.train);
        let va = index(&self.validation);
        let inside = |map: &HashMap<&str, Vec<(usize, usize)>>, session: &str, m: usize| {
            map.get(session)
                .is_some_and(|v| v.iter().any(|&(a, b)| (a..b).contains(&m)))
        };
        let mut out = FoldIndices::default();
        let mut candidates = Vec::new();
        for (i, bag) in ds.bags.iter().enumerate() {
            let sid = ds.sessions[bag.session].id.as_str();
            if bag.user == self.test_user {
                out.test.push(i);
            } else if inside(&va, sid, bag.target) {
                out.validation.push(i);
            } else if inside(&tr, sid, bag.target) {
                candidates.push(i);
            }
        }
        let val_minutes: HashSet<(usize, usize)> = out.validation.iter().flat_map(|&i| bag_minutes(ds, i)).collect();
        for i in candidates {
            if bag_minutes(ds, i).iter().any(|k| val_minutes.contains(k)) {
                out.purged += 1;
            } else {
                out.train.push(i);
            }
        }
        out
    }
}

/// One fold per user; the other users' streams are split into training
/// and validation.
pub fn loso_folds(sessions: &[Session], cfg: &SplitConfig, seed: u64) -> Result<Vec<SplitSpec>> {
    let users: Vec<String> = {
        let mut u: Vec<String> = sessions.iter().map(|s| s.user.clone()).collect();
        u.sort();
        u.dedup();
        u
    };
    if users.len() < 2 {
        return Err(Error::invalid("leave-one-user-out needs at least two users"));
    }
    let streams = label_streams(sessions, cfg.first_target, cfg.max_stream_minutes);
    Ok(users
        .iter()
        .enumerate()
        .map(|(k, test_user)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let dev: Vec<Stream> = streams.iter().filter(|s| &s.user != test_user).cloned().collect();
            let (train, validation) = stratified_split(&dev, cfg.validation_fraction, &mut rng);
            SplitSpec {
                test_user: test_user.clone(),
                train,
                validation,
                seed,
            }
        })
        .collect())
}

/// Fraction of bags per class.
pub fn class_distribution(ds: &BagDataset, idx: &[usize]) -> [f64; 8] {
    let mut d = [0.0; 8];
    for &i in idx {
        d[ds.bags[i].label.index()] += 1.0;
    }
    let n = idx.len().max(1) as f64;
    d.iter_mut().for_each(|v| *v /= n);
    d
}
