//! Higher-order Gram matrix detector.
//!
//! For each layer the channel-by-spatial feature matrix `F` is raised element-wise
//! to the power `p`, multiplied by its transpose, and brought back with a signed
//! element-wise `p`-th root. Training records per-class element-wise bounds of
//! these matrices; a test sample's out-of-bounds excess, normalized per layer,
//! is its total deviation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{predicted_classes, ActivationArchive};
use crate::error::{Error, Result};
use crate::metrics::ScoreSeries;
use crate::numeric::nearest_rank;
use crate::tensor::{Matrix, TensorBuffer};

pub const DEFAULT_ORDERS: [u32; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_EPSILON_DIV: f64 = 1e-12;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

/// Deviation charged per element when a class had no bounds samples.
const EMPTY_BOUNDS_DEVIATION: f64 = 1.0;

fn signed_root(x: f64, p: u32) -> f64 {
    match p {
        1 => x,
        2 => x.signum() * x.abs().sqrt(),
        3 => x.cbrt(),
        _ => x.signum() * x.abs().powf(1.0 / f64::from(p)),
    }
}

/// Number of entries in the upper triangle (with diagonal) of a `c x c` matrix.
pub fn upper_len(c: usize) -> usize {
    c * (c + 1) / 2
}

/// Upper triangle, row by row, of the order-`p` Gram matrix of a `[channels, spatial]`
/// feature map.
pub fn gram_matrix(feature_map: &[f64], channels: usize, spatial: usize, order: u32) -> Vec<f64> {
    assert!(order >= 1, "order must be >= 1");
    assert_eq!(feature_map.len(), channels * spatial);
    let powered: Vec<f64> = if order == 1 {
        feature_map.to_vec()
    } else {
        feature_map.iter().map(|v| v.powi(order as i32)).collect()
    };
    let mut out = Vec::with_capacity(upper_len(channels));
    for i in 0..channels {
        let a = &powered[i * spatial..(i + 1) * spatial];
        for j in i..channels {
            let b = &powered[j * spatial..(j + 1) * spatial];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            out.push(signed_root(dot, order));
        }
    }
    out
}

/// Relative excess of `v` outside `[lo, hi]`.
pub fn deviation(v: f64, lo: f64, hi: f64, epsilon_div: f64) -> f64 {
    if v < lo {
        (lo - v) / (lo.abs() + epsilon_div)
    } else if v > hi {
        (v - hi) / (hi.abs() + epsilon_div)
    } else {
        0.0
    }
}

/// Element-wise bounds of one (class, layer, order) Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Bounds {
    fn empty(len: usize) -> Self {
        Self {
            mins: vec![f64::INFINITY; len],
            maxs: vec![f64::NEG_INFINITY; len],
        }
    }

    fn absorb(&mut self, values: &[f64]) {
        for ((lo, hi), &v) in self.mins.iter_mut().zip(self.maxs.iter_mut()).zip(values) {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mins.first().is_some_and(|lo| lo > &self.maxs[0])
    }

    fn deviation_of(&self, values: &[f64], epsilon_div: f64) -> f64 {
        if self.is_empty() {
            return EMPTY_BOUNDS_DEVIATION * values.len() as f64;
        }
        values
            .iter()
            .zip(self.mins.iter().zip(&self.maxs))
            .map(|(&v, (&lo, &hi))| deviation(v, lo, hi, epsilon_div))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramConfig {
    pub orders: Vec<u32>,
    pub holdout_fraction: f64,
    pub epsilon_div: f64,
    pub seed: u64,
}

impl Default for GramConfig {
    fn default() -> Self {
        Self {
            orders: DEFAULT_ORDERS.to_vec(),
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            epsilon_div: DEFAULT_EPSILON_DIV,
            seed: 0,
        }
    }
}

impl GramConfig {
    fn validate(&self) -> Result<()> {
        if self.orders.is_empty() || self.orders.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "orders must be non-empty positive integers, got {:?}",
                self.orders
            )));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "holdout_fraction must be in (0, 0.5], got {}",
                self.holdout_fraction
            )));
        }
        if !(self.epsilon_div.is_finite() && self.epsilon_div > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_div must be positive, got {}",
                self.epsilon_div
            )));
        }
        Ok(())
    }
}

/// Gram signatures of every sample: `[sample][layer][order] -> upper triangle`.
type Signatures = Vec<Vec<Vec<Vec<f64>>>>;

fn layer_shape(t: &TensorBuffer) -> (usize, usize) {
    let shape = t.shape();
    (shape[1], shape[2..].iter().product())
}

fn signatures(data: &ActivationArchive, orders: &[u32]) -> Signatures {
    let layers: Vec<(Vec<f64>, usize, usize)> = data
        .layers()
        .iter()
        .map(|l| {
            let (c, s) = layer_shape(&l.tensor);
            (l.tensor.to_f64_vec(), c, s)
        })
        .collect();
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            layers
                .iter()
                .map(|(values, c, s)| {
                    let row = &values[i * c * s..(i + 1) * c * s];
                    orders
                        .iter()
                        .map(|&p| gram_matrix(row, *c, *s, p))
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Fitted Gram detector.
#[derive(Debug, Clone, PartialEq)]
pub struct GramProfile {
    pub orders: Vec<u32>,
    pub layer_names: Vec<String>,
    pub layer_channels: Vec<usize>,
    pub num_classes: usize,
    /// Indexed by `(class * layers + layer) * orders + order_index`.
    pub bounds: Vec<Bounds>,
    pub expected_layer_deviation: Vec<f64>,
    pub threshold: f64,
    pub epsilon_div: f64,
    /// Classes that received no bounds samples.
    pub empty_classes: Vec<usize>,
}

impl GramProfile {
    pub fn num_layers(&self) -> usize {
        self.layer_names.len()
    }

    pub fn bounds_index(&self, class: usize, layer: usize, order_index: usize) -> usize {
        (class * self.num_layers() + layer) * self.orders.len() + order_index
    }

    pub fn bounds(&self, class: usize, layer: usize, order_index: usize) -> &Bounds {
        &self.bounds[self.bounds_index(class, layer, order_index)]
    }

    fn check_layers(&self, data: &ActivationArchive) -> Result<()> {
        if data.layers().len() != self.num_layers() {
            return Err(Error::LayerMismatch(format!(
                "profile has {} layers, archive has {}",
                self.num_layers(),
                data.layers().len()
            )));
        }
        if data.num_classes() != self.num_classes {
            return Err(Error::LayerMismatch(format!(
                "profile has {} classes, archive logits have {}",
                self.num_classes,
                data.num_classes()
            )));
        }
        for (l, layer) in data.layers().iter().enumerate() {
            let (c, _) = layer_shape(&layer.tensor);
            if layer.name != self.layer_names[l] || c != self.layer_channels[l] {
                return Err(Error::LayerMismatch(format!(
                    "layer {l} is {:?} with {c} channels, profile expects {:?} with {}",
                    layer.name, self.layer_names[l], self.layer_channels[l]
                )));
            }
        }
        Ok(())
    }

    fn sample_layer_deviations(&self, class: usize, signature: &[Vec<Vec<f64>>]) -> Vec<f64> {
        signature
            .iter()
            .enumerate()
            .map(|(l, per_order)| {
                per_order
                    .iter()
                    .enumerate()
                    .map(|(p, g)| self.bounds(class, l, p).deviation_of(g, self.epsilon_div))
                    .sum()
            })
            .collect()
    }

    fn total(&self, layer_devs: &[f64]) -> f64 {
        layer_devs
            .iter()
            .zip(&self.expected_layer_deviation)
            .map(|(d, e)| d / e)
            .sum()
    }

    /// `[N, L]` unnormalized layer deviations against each sample's predicted class.
    pub fn layer_deviations(&self, data: &ActivationArchive) -> Result<Matrix> {
        self.check_layers(data)?;
        let classes = predicted_classes(data);
        let sigs = signatures(data, &self.orders);
        let rows: Vec<Vec<f64>> = sigs
            .par_iter()
            .zip(&classes)
            .map(|(sig, c)| self.sample_layer_deviations(c.index(), sig))
            .collect();
        Matrix::from_rows(&rows, self.num_layers())
    }

    /// Total deviation of every sample.
    pub fn total_deviations(&self, data: &ActivationArchive) -> Result<Vec<f64>> {
        Ok(self
            .layer_deviations(data)?
            .iter_rows()
            .map(|r| self.total(r))
            .collect())
    }

    /// Canonical scores, the negated total deviations.
    pub fn score(&self, data: &ActivationArchive) -> Result<ScoreSeries> {
        let values = self
            .total_deviations(data)?
            .into_iter()
            .map(|d| -d)
            .collect();
        ScoreSeries::new("gram", values)
    }

    pub fn is_ood(&self, total_deviation: f64) -> bool {
        total_deviation > self.threshold
    }
}

/// Splits a permutation of `0..n` into (bounds, normalization) partitions.
pub fn split_partitions(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_norm = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let norm = idx.split_off(n - n_norm);
    (idx, norm)
}

/// Fits class-conditional bounds, per-layer normalizers and the threshold.
pub fn fit_profile(train: &ActivationArchive, config: &GramConfig) -> Result<GramProfile> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::EmptyArchive);
    }
    let (bounds_idx, norm_idx) =
        split_partitions(train.len(), config.holdout_fraction, config.seed);
    let orders = config.orders.clone();
    let k = train.num_classes();
    let layer_channels: Vec<usize> = train
        .layers()
        .iter()
        .map(|l| layer_shape(&l.tensor).0)
        .collect();
    let num_layers = layer_channels.len();

    let bounds_part = train.subset(&bounds_idx);
    let classes = predicted_classes(&bounds_part);
    let sigs = signatures(&bounds_part, &orders);
    let mut bounds = Vec::with_capacity(k * num_layers * orders.len());
    for _ in 0..k {
        for &c in &layer_channels {
            for _ in &orders {
                bounds.push(Bounds::empty(upper_len(c)));
            }
        }
    }
    let mut seen = vec![false; k];
    for (sig, class) in sigs.iter().zip(&classes) {
        let c = class.index();
        seen[c] = true;
        for (l, per_order) in sig.iter().enumerate() {
            for (p, g) in per_order.iter().enumerate() {
                bounds[(c * num_layers + l) * orders.len() + p].absorb(g);
            }
        }
    }
    let empty_classes: Vec<usize> = (0..k).filter(|&c| !seen[c]).collect();
    if empty_classes.len() == k {
        return Err(Error::EmptyPredictedClass);
    }
    if !empty_classes.is_empty() {
        log::warn!("EmptyPredictedClass: no bounds samples predicted as {empty_classes:?}");
    }

    let mut profile = GramProfile {
        orders,
        layer_names: train.layer_names(),
        layer_channels,
        num_classes: k,
        bounds,
        expected_layer_deviation: vec![1.0; num_layers],
        threshold: 0.0,
        epsilon_div: config.epsilon_div,
        empty_classes,
    };

    let norm_part = train.subset(&norm_idx);
    let devs = profile.layer_deviations(&norm_part)?;
    let n = devs.rows() as f64;
    profile.expected_layer_deviation = (0..num_layers)
        .map(|l| {
            let mean = devs.iter_rows().map(|r| r[l]).sum::<f64>() / n;
            mean.max(config.epsilon_div)
        })
        .collect();
    let totals: Vec<f64> = devs.iter_rows().map(|r| profile.total(r)).collect();
    profile.threshold = nearest_rank(&totals, 95).expect("normalization partition is non-empty");
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Layer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn gram_examples() {
        assert_eq!(
            gram_matrix(&[1.0, 0.0, 0.0, 1.0], 2, 2, 1),
            vec![1.0, 0.0, 1.0]
        );
        let g = gram_matrix(&[1.0, 2.0], 1, 2, 2);
        assert!((g[0] - 17f64.sqrt()).abs() < 1e-12);
        assert_eq!(gram_matrix(&[], 2, 0, 3), vec![0.0; 3]);
    }

    #[test]
    fn gram_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let (c, s) = (rng.random_range(1..5), rng.random_range(1..6));
            let f: Vec<f64> = (0..c * s).map(|_| rng.random_range(-2.0..2.0)).collect();
            for p in 1..=3u32 {
                let g = gram_matrix(&f, c, s, p);
                let mut k = 0;
                for i in 0..c {
                    for j in i..c {
                        let mut acc = 0.0;
                        for t in 0..s {
                            acc += f[i * s + t].powi(p as i32) * f[j * s + t].powi(p as i32);
                        }
                        let expect = acc.signum() * acc.abs().powf(1.0 / p as f64);
                        assert!((g[k] - expect).abs() < 1e-9);
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(deviation(0.5, 0.0, 1.0, 1e-12), 0.0);
        assert!((deviation(2.0, 0.0, 1.0, 1e-12) - 1.0).abs() < 1e-11);
        assert!((deviation(-3.0, -1.0, 1.0, 1e-12) - 2.0).abs() < 1e-11);
        assert!(deviation(1.0, 0.0, 0.0, 1e-12) > 1e11);
    }

    proptest! {
        #[test]
        fn order_one_is_outer_product(f in prop::collection::vec(-3.0f64..3.0, 6)) {
            let g = gram_matrix(&f, 2, 3, 1);
            let dot = |i: usize, j: usize| (0..3).map(|t| f[i * 3 + t] * f[j * 3 + t]).sum::<f64>();
            prop_assert!((g[0] - dot(0, 0)).abs() < 1e-12);
            prop_assert!((g[1] - dot(0, 1)).abs() < 1e-12);
            prop_assert!((g[2] - dot(1, 1)).abs() < 1e-12);
        }

        #[test]
        fn spatial_permutation_invariant(f in prop::collection::vec(-3.0f64..3.0, 8), p in 1u32..5) {
            // swap spatial columns 0 and 3 in both channels
            let mut g = f.clone();
            g.swap(0, 3);
            g.swap(4, 7);
            let a = gram_matrix(&f, 2, 4, p);
            let b = gram_matrix(&g, 2, 4, p);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    fn blob_archive(seed: u64, n: usize, offset: f64) -> ActivationArchive {
        // two predicted classes; channel 0 encodes the class, logits follow it
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, s) = (3, 2);
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        for i in 0..n {
            let class = i % 2;
            for ch in 0..c {
                for _ in 0..s {
                    let base = if ch == 0 {
                        1.0 + 4.0 * class as f64
                    } else {
                        1.0
                    };
                    feats.push(base + offset + rng.random_range(0.0..0.5));
                }
            }
            logits.extend(if class == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
        ActivationArchive::new(
            vec![Layer {
                name: "conv".into(),
                tensor: TensorBuffer::from_f64(vec![n, c, s, 1], feats).unwrap(),
            }],
            TensorBuffer::from_f64(vec![n, 2], logits).unwrap(),
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn identical_samples_give_zero_threshold() {
        let n = 20;
        let a = ActivationArchive::new(
            vec![Layer {
                name: "d".into(),
                tensor: TensorBuffer::from_f64(vec![n, 2], [0.3, 1.5].repeat(n)).unwrap(),
            }],
            TensorBuffer::from_f64(vec![n, 2], [1.0, 0.0].repeat(n)).unwrap(),
            None,
            None,
        )
        .unwrap();
        let p = fit_profile(&a, &GramConfig::default()).unwrap();
        assert_eq!(p.expected_layer_deviation, vec![DEFAULT_EPSILON_DIV]);
        assert_eq!(p.threshold, 0.0);
        assert_eq!(p.empty_classes, vec![1]);
        assert!(p.total_deviations(&a).unwrap().iter().all(|&d| d == 0.0));
        let b = p.bounds(0, 0, 2);
        assert_eq!(b.mins, b.maxs);
    }

    #[test]
    fn bounds_samples_have_zero_deviation() {
        let a = blob_archive(1, 100, 0.0);
        let cfg = GramConfig::default();
        let p = fit_profile(&a, &cfg).unwrap();
        let (bounds_idx, norm_idx) = split_partitions(a.len(), cfg.holdout_fraction, cfg.seed);
        assert_eq!(norm_idx.len(), 20);
        let d = p.total_deviations(&a.subset(&bounds_idx)).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
        let s = p.score(&a).unwrap();
        assert!(s.values().iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn normalization_partition_flags_at_most_five_percent() {
        let a = blob_archive(2, 500, 0.0);
        let cfg = GramConfig {
            holdout_fraction: 0.4,
            ..GramConfig::default()
        };
        let p = fit_profile(&a, &cfg).unwrap();
        let (_, norm) = split_partitions(a.len(), cfg.holdout_fraction, cfg.seed);
        let d = p.total_deviations(&a.subset(&norm)).unwrap();
        let flagged = d.iter().filter(|&&x| p.is_ood(x)).count();
        assert!(flagged <= (0.05 * norm.len() as f64).ceil() as usize + 1);
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(p.threshold, sorted[(95 * sorted.len()).div_ceil(100) - 1]);
        assert!(!p.is_ood(p.threshold));
    }

    #[test]
    fn class_bounds_differ_and_cross_feeding_deviates() {
        let a = blob_archive(3, 100, 0.0);
        let p = fit_profile(&a, &GramConfig::default()).unwrap();
        assert_ne!(p.bounds(0, 0, 0), p.bounds(1, 0, 0));
        let sample = a.subset(&[1]); // class 1
        let sig = &signatures(&sample, &p.orders)[0];
        let own = p.sample_layer_deviations(1, sig);
        let other = p.sample_layer_deviations(0, sig);
        assert!(other[0] > 0.0);
        assert!(own[0] <= other[0]);
    }

    #[test]
    fn scaling_normalizers_uniformly_preserves_ranking() {
        let a = blob_archive(4, 100, 0.0);
        let shifted = blob_archive(5, 40, 0.7);
        let p = fit_profile(&a, &GramConfig::default()).unwrap();
        let mut q = p.clone();
        q.expected_layer_deviation
            .iter_mut()
            .for_each(|e| *e *= 2.0);
        let d1 = p.total_deviations(&shifted).unwrap();
        let d2 = q.total_deviations(&shifted).unwrap();
        for (x, y) in d1.iter().zip(&d2) {
            assert!((x / 2.0 - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn bad_config_rejected() {
        let a = blob_archive(6, 10, 0.0);
        let bad = GramConfig {
            holdout_fraction: 0.7,
            ..GramConfig::default()
        };
        assert!(matches!(
            fit_profile(&a, &bad),
            Err(Error::InvalidConfig(_))
        ));
        let bad = GramConfig {
            orders: vec![0],
            ..GramConfig::default()
        };
        assert!(fit_profile(&a, &bad).is_err());
    }

    #[test]
    fn empty_class_bounds_deviate_everywhere() {
        let b = Bounds::empty(3);
        assert!(b.is_empty());
        assert_eq!(b.deviation_of(&[0.0, 1.0, 2.0], 1e-12), 3.0);
    }
}
