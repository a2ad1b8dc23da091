//! Energy score over logits, `E(x) = -T * log sum_i exp(f_i(x) / T)`.

use serde::{Deserialize, Serialize};

use crate::archive::ActivationArchive;
use crate::error::{Error, Result};
use crate::metrics::ScoreSeries;
use crate::numeric::{log_sum_exp, nearest_rank};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Fitted energy detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub temperature: f64,
    /// Energy above which a sample is flagged OOD.
    pub threshold: f64,
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be finite and positive, got {t}"
        )));
    }
    Ok(())
}

/// Energy of one logit vector.
pub fn energy(logits: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLogit { index, value });
    }
    let scaled: Vec<f64> = logits.iter().map(|&f| f / temperature).collect();
    Ok(-temperature * log_sum_exp(&scaled))
}

fn energies(data: &ActivationArchive, temperature: f64) -> Result<Vec<f64>> {
    data.logits_matrix()
        .iter_rows()
        .map(|row| energy(row, temperature))
        .collect()
}

/// Threshold at the nearest-rank 95th percentile of in-distribution energies.
pub fn fit_threshold(in_dist: &ActivationArchive, temperature: f64) -> Result<EnergyConfig> {
    check_temperature(temperature)?;
    let e = energies(in_dist, temperature)?;
    let threshold = nearest_rank(&e, 95).ok_or(Error::EmptyArchive)?;
    Ok(EnergyConfig {
        temperature,
        threshold,
    })
}

impl EnergyConfig {
    /// Canonical scores, the negated energies.
    pub fn score(&self, data: &ActivationArchive) -> Result<ScoreSeries> {
        let values = energies(data, self.temperature)?
            .into_iter()
            .map(|e| -e)
            .collect();
        ScoreSeries::new("energy", values)
    }

    pub fn is_ood(&self, energy: f64) -> bool {
        energy > self.threshold
    }
}
