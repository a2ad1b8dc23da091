//! End-to-end orchestration: fitting a detector with its calibration slice, and
//! the synthetic three-detector comparison.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::ActivationArchive;
use crate::calibration::fit_calibration;
use crate::detector::{Detector, FittedDetector, Method};
use crate::energy::{fit_threshold, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::gram::{fit_profile, GramConfig};
use crate::mahalanobis::{
    fit_layer_weights, search_noise_magnitude, MahalanobisModel, Ridge, NOISE_GRID,
};
use crate::metrics::{evaluate, histogram_report, EvalReport, Histogram, MeanSd, ScoreSeries};
use crate::micronet::{
    fgsm_batch, to_archive, train, MicroNet, OodKind, SyntheticTask, TrainConfig,
};

/// Share of the training archive held out to fit the confidence calibration.
pub const CALIBRATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub method: Method,
    pub ridge: Ridge,
    pub gram: GramConfig,
    pub temperature: f64,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ridge: Ridge::default(),
            gram: GramConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// Seeded split of `0..n` into (fit, calibration) indices, both kept sorted.
pub fn calibration_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_cal = ((n as f64 * CALIBRATION_FRACTION).round() as usize)
        .clamp(1.min(n), n.saturating_sub(1).max(1.min(n)));
    let mut cal = idx.split_off(n - n_cal);
    idx.sort_unstable();
    cal.sort_unstable();
    (idx, cal)
}

/// Fits the chosen detector on the fit slice of `train` and calibrates it on
/// the held-out slice. `adversarial`, when given, trains the Mahalanobis
/// layer combiner.
pub fn fit_detector(
    train: &ActivationArchive,
    adversarial: Option<&ActivationArchive>,
    options: &FitOptions,
) -> Result<FittedDetector> {
    if train.len() < 2 {
        return Err(Error::EmptyArchive);
    }
    let (fit_idx, cal_idx) = calibration_split(train.len(), options.seed);
    let fit_part = train.subset(&fit_idx);
    let detector = match options.method {
        Method::Mahalanobis => {
            let mut model = MahalanobisModel::fit(&fit_part, options.ridge)?;
            if let Some(adv) = adversarial {
                model.weights = fit_layer_weights(&fit_part, adv, &model)?;
            }
            Detector::Mahalanobis(model)
        }
        Method::Gram => Detector::Gram(fit_profile(&fit_part, &options.gram)?),
        Method::Energy => Detector::Energy(fit_threshold(&fit_part, options.temperature)?),
    };
    let cal_scores = detector.score(&train.subset(&cal_idx))?;
    let calibration = fit_calibration(cal_scores.values())?;
    Ok(FittedDetector {
        detector,
        calibration,
    })
}

/// Settings of the synthetic comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub radius: f64,
    pub sigma: f64,
    pub far_distance: f64,
    /// Noise of the near-OOD cluster relative to `sigma`.
    pub near_spread: f64,
    pub n_per_class: usize,
    pub n_ood: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// FGSM step used to craft the adversarial set for the Mahalanobis combiner.
    pub adversarial_epsilon: f64,
    pub noise_grid: Vec<f64>,
    pub gram_orders: Vec<u32>,
    pub trials: usize,
    pub bins: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 4,
            input_dim: 8,
            hidden: vec![32, 32],
            radius: 4.0,
            sigma: 1.0,
            far_distance: 20.0,
            near_spread: 2.0,
            n_per_class: 200,
            n_ood: 400,
            epochs: 100,
            learning_rate: 0.01,
            adversarial_epsilon: 0.5,
            noise_grid: NOISE_GRID.to_vec(),
            gram_orders: crate::gram::DEFAULT_ORDERS.to_vec(),
            trials: 5,
            bins: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub method: String,
    pub dataset: String,
    pub tnr_at_tpr95: MeanSd,
    pub auroc: MeanSd,
    pub detection_accuracy: MeanSd,
}

impl DemoRow {
    fn from_report(dataset: &str, r: &EvalReport) -> Self {
        Self {
            method: r.method.clone(),
            dataset: dataset.to_string(),
            tnr_at_tpr95: r.tnr_at_tpr95,
            auroc: r.auroc,
            detection_accuracy: r.detection_accuracy,
        }
    }
}

/// Methods x datasets x metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTable {
    pub seed: u64,
    pub train_accuracy: f64,
    pub mahalanobis_noise_magnitude: f64,
    pub rows: Vec<DemoRow>,
}

impl DemoTable {
    pub fn row(&self, method: Method, dataset: &str) -> Option<&DemoRow> {
        self.rows
            .iter()
            .find(|r| r.method == method.as_str() && r.dataset == dataset)
    }
}

/// Scores of one detector on the in-distribution test split and both OOD sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoScores {
    pub method: Method,
    pub test: ScoreSeries,
    pub near: ScoreSeries,
    pub far: ScoreSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutcome {
    pub table: DemoTable,
    pub scores: Vec<DemoScores>,
    pub net: MicroNet,
}

impl DemoOutcome {
    /// Histograms of (method, dataset) in-vs-OOD score distributions.
    pub fn histograms(&self, bins: usize) -> Result<Vec<(Method, &'static str, Histogram)>> {
        let mut out = Vec::new();
        for s in &self.scores {
            out.push((
                s.method,
                "near",
                histogram_report(s.test.values(), s.near.values(), bins)?,
            ));
            out.push((
                s.method,
                "far",
                histogram_report(s.test.values(), s.far.values(), bins)?,
            ));
        }
        Ok(out)
    }
}

/// Trains a micronet on Gaussian blobs and compares the three detectors on a
/// near-OOD (inter-centre midpoints) and a far-OOD cluster.
pub fn run_demo(cfg: &DemoConfig) -> Result<DemoOutcome> {
    let far_task = SyntheticTask::blobs(
        cfg.num_classes,
        cfg.input_dim,
        cfg.radius,
        cfg.sigma,
        OodKind::Far {
            distance: cfg.far_distance,
        },
        cfg.seed,
    )?;
    let near_task = SyntheticTask {
        ood: OodKind::Near {
            spread: cfg.near_spread,
        },
        ..far_task.clone()
    };
    // identical seeds give identical in-distribution splits
    let far = far_task.sample(cfg.n_per_class, cfg.n_ood)?;
    let near = near_task.sample(cfg.n_per_class, cfg.n_ood)?;

    let mut sizes = vec![cfg.input_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(cfg.num_classes);
    let net = MicroNet::init(&sizes, cfg.seed)?;
    let net = train(
        &net,
        &far.train,
        &TrainConfig {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
        },
    )?;
    let correct = far
        .train
        .inputs
        .iter_rows()
        .zip(&far.train.labels)
        .map(|(x, &y)| net.predict(x).map(|p| (p == y) as usize))
        .sum::<Result<usize>>()?;
    let train_accuracy = correct as f64 / far.train.len() as f64;

    let train_a = to_archive(&net, &far.train.inputs, Some(&far.train.labels))?;
    let test_a = to_archive(&net, &far.test.inputs, Some(&far.test.labels))?;
    let near_a = to_archive(&net, &near.ood, None)?;
    let far_a = to_archive(&net, &far.ood, None)?;

    let mut maha = MahalanobisModel::fit(&train_a, Ridge::default())?;
    let adversarial = fgsm_batch(&net, &far.train, cfg.adversarial_epsilon)?;
    let search = search_noise_magnitude(
        &maha,
        &net,
        &far.train.inputs,
        &adversarial,
        &cfg.noise_grid,
    )?;
    maha.weights = search.weights;
    maha.noise_magnitude = search.noise_magnitude;
    let maha_scores = DemoScores {
        method: Method::Mahalanobis,
        test: maha.score_with_net(&net, &far.test.inputs)?,
        near: maha.score_with_net(&net, &near.ood)?,
        far: maha.score_with_net(&net, &far.ood)?,
    };

    let gram = fit_profile(
        &train_a,
        &GramConfig {
            orders: cfg.gram_orders.clone(),
            seed: cfg.seed,
            ..GramConfig::default()
        },
    )?;
    let gram_scores = DemoScores {
        method: Method::Gram,
        test: gram.score(&test_a)?,
        near: gram.score(&near_a)?,
        far: gram.score(&far_a)?,
    };

    let energy = fit_threshold(&train_a, DEFAULT_TEMPERATURE)?;
    let energy_scores = DemoScores {
        method: Method::Energy,
        test: energy.score(&test_a)?,
        near: energy.score(&near_a)?,
        far: energy.score(&far_a)?,
    };

    let scores = vec![maha_scores, gram_scores, energy_scores];
    let mut rows = Vec::new();
    for s in &scores {
        for (name, ood) in [("near", &s.near), ("far", &s.far)] {
            let report = evaluate(&s.test, ood, cfg.trials, cfg.seed)?;
            rows.push(DemoRow::from_report(name, &report));
        }
    }
    Ok(DemoOutcome {
        table: DemoTable {
            seed: cfg.seed,
            train_accuracy,
            mahalanobis_noise_magnitude: search.noise_magnitude,
            rows,
        },
        scores,
        net,
    })
}
