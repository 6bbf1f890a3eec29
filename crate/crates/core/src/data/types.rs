use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::accel::AccelStream;
use crate::error::{Error, Result};
use crate::geo::LocStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Still,
    Walk,
    Run,
    Bike,
    Car,
    Bus,
    Train,
    Subway,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Still,
        Mode::Walk,
        Mode::Run,
        Mode::Bike,
        Mode::Car,
        Mode::Bus,
        Mode::Train,
        Mode::Subway,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("mode index {i} out of range")))
    }

    /// SHL coarse label: 1 still .. 8 subway, 0 null.
    pub fn from_shl(code: u32) -> Option<Self> {
        (1..=8).contains(&code).then(|| Self::ALL[code as usize - 1])
    }

    pub fn name(self) -> &'static str {
        ["still", "walk", "run", "bike", "car", "bus", "train", "subway"][self.index()]
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == t)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s}")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Placement {
    Bag,
    Hand,
    Hips,
    Torso,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::Bag, Placement::Hand, Placement::Hips, Placement::Torso];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Bag => "Bag",
            Placement::Hand => "Hand",
            Placement::Hips => "Hips",
            Placement::Torso => "Torso",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown placement {s}")))
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One recording day of one user, on a one-minute frame grid starting at
/// `start_ms`.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub user: String,
    pub day: String,
    pub start_ms: i64,
    /// 10 Hz streams; sample `600 m` opens frame `m`.
    pub accel: BTreeMap<Placement, AccelStream>,
    /// Placements whose files were absent at ingestion.
    pub missing: Vec<Placement>,
    pub location: LocStream,
    /// One label per frame; `None` where the annotation is null.
    pub labels: Vec<Option<Mode>>,
}

impl Session {
    pub fn id(&self) -> String {
        format!("{}/{}", self.user, self.day)
    }

    pub fn minutes(&self) -> usize {
        self.labels.len()
    }

    pub fn placements(&self) -> Vec<Placement> {
        self.accel.keys().copied().collect()
    }

    pub fn labelled_minutes(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}
