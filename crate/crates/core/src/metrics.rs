//! Detection metrics. In-distribution samples are positives, OOD samples are
//! negatives, and a sample is accepted as in-distribution when its canonical
//! score is `>= t`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample detector scores, higher meaning more in-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    values: Vec<f64>,
    source_tag: String,
}

impl ScoreSeries {
    pub fn new(source_tag: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteScore { index, value });
        }
        Ok(Self {
            values,
            source_tag: source_tag.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn check_nonempty(in_scores: &[f64], ood_scores: &[f64]) -> Result<()> {
    if in_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Threshold accepting at least 95% of the in-distribution scores: the
/// `ceil(0.95 n)`-th largest value.
pub fn tpr95_threshold(in_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() {
        return Err(Error::EmptySeries);
    }
    let n = in_scores.len();
    let k = (95 * n).div_ceil(100).max(1);
    let s = sorted(in_scores);
    Ok(s[n - k])
}

/// TNR (in percent) at the threshold where 95% of in-distribution samples are accepted.
pub fn tnr_at_tpr95(in_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(in_scores, ood_scores)?;
    let t = tpr95_threshold(in_scores)?;
    let tn = ood_scores.iter().filter(|&&s| s < t).count();
    Ok(100.0 * tn as f64 / ood_scores.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney statistic, ties credited 0.5.
pub fn auroc(in_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(in_scores, ood_scores)?;
    let ins = sorted(in_scores);
    let oods = sorted(ood_scores);
    // twice the number of concordant pairs, plus tied pairs once
    let mut doubled: u128 = 0;
    let mut j = 0usize;
    let mut i = 0usize;
    while i < ins.len() {
        let v = ins[i];
        let mut group = 0u128;
        while i < ins.len() && ins[i] == v {
            group += 1;
            i += 1;
        }
        while j < oods.len() && oods[j] < v {
            j += 1;
        }
        let below = j as u128;
        let mut ties = 0u128;
        let mut jj = j;
        while jj < oods.len() && oods[jj] == v {
            ties += 1;
            jj += 1;
        }
        doubled += group * (2 * below + ties);
    }
    let total = 2 * ins.len() as u128 * oods.len() as u128;
    Ok(doubled as f64 / total as f64)
}

/// Balanced accuracy `0.5 * (TPR + TNR)` for the given counts.
pub(crate) fn balanced_accuracy(tp: usize, n_in: usize, tn: usize, n_ood: usize) -> f64 {
    0.5 * (tp as f64 / n_in as f64 + tn as f64 / n_ood as f64)
}

/// Best balanced accuracy over all thresholds.
pub fn detection_accuracy(in_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(in_scores, ood_scores)?;
    let ins = sorted(in_scores);
    let oods = sorted(ood_scores);
    let (n_in, n_ood) = (ins.len(), oods.len());
    let mut candidates: Vec<f64> = ins.iter().chain(oods.iter()).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // t = +inf rejects everything
    let mut best = balanced_accuracy(0, n_in, n_ood, n_ood);
    let (mut i, mut j) = (0usize, 0usize);
    for &t in &candidates {
        while i < n_in && ins[i] < t {
            i += 1;
        }
        while j < n_ood && oods[j] < t {
            j += 1;
        }
        let acc = balanced_accuracy(n_in - i, n_in, j, n_ood);
        if acc > best {
            best = acc;
        }
    }
    Ok(best)
}

/// Shared-edge histogram of the two populations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub count_in: Vec<usize>,
    pub count_ood: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.count_in.len()
    }

    /// CSV with header `bin_lo,bin_hi,count_in,count_ood`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count_in,count_ood\n");
        for b in 0..self.bins() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.count_in[b],
                self.count_ood[b]
            );
        }
        out
    }
}

/// Bins both populations on edges spanning the pooled range.
pub fn histogram_report(in_scores: &[f64], ood_scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "bins must be >= 2, got {bins}"
        )));
    }
    let pooled = in_scores.iter().chain(ood_scores);
    let lo = pooled.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = pooled.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let bin_of = |v: f64| -> usize {
        if width > 0.0 {
            (((v - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        }
    };
    let mut count_in = vec![0; bins];
    let mut count_ood = vec![0; bins];
    in_scores.iter().for_each(|&v| count_in[bin_of(v)] += 1);
    ood_scores.iter().for_each(|&v| count_ood[bin_of(v)] += 1);
    Ok(Histogram {
        edges,
        count_in,
        count_ood,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// The three point metrics for one pair of series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub tnr_at_tpr95: f64,
    pub auroc: f64,
    pub detection_accuracy: f64,
}

pub fn point_metrics(in_scores: &[f64], ood_scores: &[f64]) -> Result<PointMetrics> {
    Ok(PointMetrics {
        tnr_at_tpr95: tnr_at_tpr95(in_scores, ood_scores)?,
        auroc: auroc(in_scores, ood_scores)?,
        detection_accuracy: detection_accuracy(in_scores, ood_scores)?,
    })
}

/// Summary over repeated trials, serialized as the evaluation report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_in: usize,
    pub n_ood: usize,
    pub tnr_at_tpr95: MeanSd,
    pub auroc: MeanSd,
    pub detection_accuracy: MeanSd,
}

fn resample(values: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..values.len())
        .map(|_| values[rng.random_range(0..values.len())])
        .collect()
}

/// Metrics averaged over `trials` repetitions.
///
/// Trial 0 scores the series as given; trial `i > 0` scores a bootstrap
/// resample of both series drawn from a generator seeded with `seed + i`.
pub fn evaluate(
    in_scores: &ScoreSeries,
    ood_scores: &ScoreSeries,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_nonempty(in_scores.values(), ood_scores.values())?;
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    let runs: Vec<PointMetrics> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            if trial == 0 {
                return point_metrics(in_scores.values(), ood_scores.values());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
            let a = resample(in_scores.values(), &mut rng);
            let b = resample(ood_scores.values(), &mut rng);
            point_metrics(&a, &b)
        })
        .collect::<Result<_>>()?;
    let collect = |f: fn(&PointMetrics) -> f64| MeanSd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        method: in_scores.source_tag().to_string(),
        n_in: in_scores.len(),
        n_ood: ood_scores.len(),
        tnr_at_tpr95: collect(|m| m.tnr_at_tpr95),
        auroc: collect(|m| m.auroc),
        detection_accuracy: collect(|m| m.detection_accuracy),
    })
}
