use rand::Rng;

use super::types::{Placement, Session};
use crate::error::{Error, Result};

/// Per-minute placement schedule over one session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VirtualStream {
    pub session: String,
    pub placements: Vec<Placement>,
}

/// `k` virtual streams for a session. Each starts on a uniformly chosen
/// placement and, at every minute boundary, switches with probability
/// `1 / mean_dwell` to a different placement chosen uniformly. An infinite
/// `mean_dwell` never switches.
pub fn mixed_streams<R: Rng + ?Sized>(
    session: &Session,
    k: usize,
    mean_dwell: f64,
    rng: &mut R,
) -> Result<Vec<VirtualStream>> {
    let avail = session.placements();
    if avail.len() < 2 {
        return Err(Error::invalid(format!(
            "{} has fewer than two placements",
            session.id()
        )));
    }
    if mean_dwell < 1.0 || mean_dwell.is_nan() {
        return Err(Error::config("mean dwell must be at least one minute"));
    }
    let p_switch = 1.0 / mean_dwell;
    Ok((0..k)
        .map(|_| {
            let mut cur = rng.random_range(0..avail.len());
            let placements = (0..session.minutes())
                .map(|m| {
                    if m > 0 && rng.random::<f64>() < p_switch {
                        let step = rng.random_range(1..avail.len());
                        cur = (cur + step) % avail.len();
                    }
                    avail[cur]
                })
                .collect();
            VirtualStream {
                session: session.id(),
                placements,
            }
        })
        .collect())
}
