//! Two-car coupling: slipstream lap-time penalty and gap evolution.

use serde::{Deserialize, Serialize};

use crate::track::TrackConfig;

/// Signed gaps of both cars; positive means behind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuelState {
    pub gap_1: f64,
    pub gap_i: f64,
}

impl DuelState {
    /// Car 1 starts `gap` seconds behind car i.
    pub fn antisymmetric(gap: f64) -> Self {
        Self { gap_1: gap, gap_i: -gap }
    }
}

/// Lap time lost by running `t_gap` seconds behind. Zero outside the
/// closed window `[gap_lo, gap_hi]`.
pub fn interaction_penalty(t_gap: f64, cfg: &TrackConfig) -> f64 {
    let p = &cfg.interaction;
    if (p.gap_lo..=p.gap_hi).contains(&t_gap) {
        p.a * t_gap + p.b
    } else {
        0.0
    }
}

/// Zero-sum gap update from one lap of both cars.
pub fn update_gaps(d: DuelState, t_lap_1: f64, t_lap_i: f64) -> DuelState {
    let delta = t_lap_1 - t_lap_i;
    DuelState { gap_1: d.gap_1 + delta, gap_i: d.gap_i - delta }
}
