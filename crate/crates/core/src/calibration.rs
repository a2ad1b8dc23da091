//! Maps canonical detector scores onto a 0-100 confidence scale.
//!
//! Scores at or above the in-distribution threshold `tau` land in `[90, 100]`;
//! scores below it fall linearly from 90 with the same denominator and are
//! clipped at 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::nearest_rank;

pub const MIN_DENOMINATOR: f64 = 1e-12;
const MIN_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub tau: f64,
    pub s_max: f64,
    pub denominator: f64,
}

/// Fits the map on in-distribution canonical scores.
pub fn fit_calibration(in_scores: &[f64]) -> Result<CalibrationMap> {
    let tau = nearest_rank(in_scores, 5).ok_or(Error::EmptyScores)?;
    if in_scores.len() < MIN_SAMPLES {
        log::warn!(
            "DegenerateCalibration: only {} samples (want >= {MIN_SAMPLES})",
            in_scores.len()
        );
    }
    let s_max = in_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(CalibrationMap {
        tau,
        s_max,
        denominator: (s_max - tau).max(MIN_DENOMINATOR),
    })
}

impl CalibrationMap {
    pub fn confidence(&self, s: f64) -> f64 {
        let offset = (s - self.tau) / self.denominator;
        if s >= self.tau {
            (90.0 + 10.0 * offset).min(100.0)
        } else {
            (90.0 + 90.0 * offset).max(0.0)
        }
    }
}
