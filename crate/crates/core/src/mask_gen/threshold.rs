use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Baseline fixed threshold, also the default absolute score floor.
pub const DEFAULT_FLOOR: f64 = 0.2;

/// Gaps below this count as flat.
pub const FLAT_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub tau: f64,
    /// Selected entity indices, ascending.
    pub selected: Vec<usize>,
    /// Entities above the cut that the floor removed, ascending.
    pub below_floor: Vec<usize>,
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("threshold over an empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

/// Indices ordered by descending score; equal scores keep index order.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Largest-gap cut on the descending score curve.
///
/// With scores sorted high to low, the cut falls at the largest drop between
/// neighbours (first such drop on ties); `tau` is the midpoint of that drop
/// and everything above it is kept. One score keeps itself with `tau` equal
/// to it; a flat curve (every drop below [`FLAT_GAP`]) keeps everything with
/// `tau` at the lowest score. Survivors below `floor` are then discarded,
/// which can leave the selection empty.
pub fn adaptive_threshold(scores: &[f64], floor: f64) -> Result<ThresholdResult> {
    check_scores(scores)?;
    if !(-1.0..=1.0).contains(&floor) {
        return Err(Error::invalid(format!("floor {floor} outside [-1, 1]")));
    }
    let order = descending_order(scores);
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();

    let (keep, tau) = if sorted.len() == 1 {
        (1, sorted[0])
    } else {
        let mut best = 0;
        let mut best_gap = f64::NEG_INFINITY;
        for i in 0..sorted.len() - 1 {
            let gap = sorted[i] - sorted[i + 1];
            if gap > best_gap {
                best_gap = gap;
                best = i;
            }
        }
        if best_gap < FLAT_GAP {
            (sorted.len(), sorted[sorted.len() - 1])
        } else {
            (best + 1, (sorted[best] + sorted[best + 1]) / 2.0)
        }
    };

    let (mut selected, mut below_floor): (Vec<usize>, Vec<usize>) =
        order[..keep].iter().partition(|&&i| scores[i] >= floor);
    selected.sort_unstable();
    below_floor.sort_unstable();
    Ok(ThresholdResult { tau, selected, below_floor })
}

/// Fixed-threshold baseline: keep every score `>= tau`.
pub fn fixed_threshold(scores: &[f64], tau: f64) -> Result<ThresholdResult> {
    check_scores(scores)?;
    let selected = (0..scores.len()).filter(|&i| scores[i] >= tau).collect();
    Ok(ThresholdResult { tau, selected, below_floor: Vec::new() })
}
