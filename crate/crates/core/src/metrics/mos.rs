//! Naturalness proxy: penalize frame transitions the clean generator never
//! produces and long runs of repeated frames.

use crate::seqdata::{is_attested_transition, TokenGrid};

/// Runs of identical consecutive frames longer than this are repetitive.
pub const REPETITION_THRESHOLD: usize = 3;

/// Weights of the two roughness terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roughness {
    pub transition: f64,
    pub repetition: f64,
}

pub(crate) const SEEN_ROUGHNESS: Roughness = Roughness {
    transition: 0.75,
    repetition: 0.25,
};

pub(crate) const UNSEEN_ROUGHNESS: Roughness = Roughness {
    transition: 0.6,
    repetition: 0.4,
};

/// Fraction of adjacent-frame transitions that are not attested; 0 for a
/// single frame.
pub fn unattested_fraction(grid: &TokenGrid) -> f64 {
    let t = grid.frames();
    if t < 2 {
        return 0.0;
    }
    let bad = (1..t)
        .filter(|&i| !is_attested_transition(grid.row(i - 1), grid.row(i)))
        .count();
    bad as f64 / (t - 1) as f64
}

/// Fraction of frames that sit in a run of more than
/// [`REPETITION_THRESHOLD`] identical frames.
pub fn repetition_fraction(grid: &TokenGrid) -> f64 {
    let t = grid.frames();
    let mut in_runs = 0;
    let mut start = 0;
    for i in 1..=t {
        if i == t || grid.row(i) != grid.row(start) {
            if i - start > REPETITION_THRESHOLD {
                in_runs += i - start;
            }
            start = i;
        }
    }
    in_runs as f64 / t as f64
}

pub fn mos_with(grid: &TokenGrid, weights: Roughness) -> f64 {
    let rough = weights.transition * unattested_fraction(grid) + weights.repetition * repetition_fraction(grid);
    (5.0 - 4.0 * rough).clamp(1.0, 5.0)
}

pub fn mos_proxy(grid: &TokenGrid) -> f64 {
    mos_with(grid, SEEN_ROUGHNESS)
}
