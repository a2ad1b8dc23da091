//! Class-conditional Gaussian detector with a tied covariance per layer.
//!
//! Each layer is scored by `max_c -(f - mu_c)^T P (f - mu_c)` where `P` is the
//! inverse of the shared covariance. Layer scores are combined linearly, either
//! uniformly or with weights from a logistic regression against adversarial
//! samples.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{spatial_mean, ActivationArchive};
use crate::error::{Error, Result};
use crate::metrics::{auroc, ScoreSeries};
use crate::micronet::{GradientTarget, MicroNet};
use crate::tensor::Matrix;

/// Noise magnitudes tried by [`search_noise_magnitude`].
pub const NOISE_GRID: [f64; 8] = [0.0, 0.0005, 0.001, 0.0014, 0.002, 0.0024, 0.005, 0.01];

const RIDGE_RETRIES: usize = 3;
const COMBINER_EPOCHS: usize = 500;
const COMBINER_STEP: f64 = 0.01;

/// Diagonal loading added to the tied covariance before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ridge {
    /// Absolute `lambda`.
    Fixed(f64),
    /// `lambda = factor * trace(cov) / dim`; falls back to `factor` when the trace is zero.
    TraceScaled(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::TraceScaled(1e-6)
    }
}

impl Ridge {
    fn validate(self) -> Result<()> {
        let v = match self {
            Ridge::Fixed(v) | Ridge::TraceScaled(v) => v,
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "ridge must be positive, got {v}"
            )));
        }
        Ok(())
    }

    fn lambda(self, trace: f64, dim: usize) -> f64 {
        match self {
            Ridge::Fixed(v) => v,
            Ridge::TraceScaled(f) => {
                let scaled = f * trace / dim as f64;
                if scaled > 0.0 {
                    scaled
                } else {
                    f
                }
            }
        }
    }
}

/// Class means and shared precision matrix for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGaussians {
    pub layer_index: usize,
    /// `[K, C]`
    pub means: Matrix,
    /// `[C, C]`, symmetric positive definite.
    pub precision: Matrix,
}

impl LayerGaussians {
    pub fn new(layer_index: usize, means: Matrix, precision: Matrix) -> Result<Self> {
        let c = means.cols();
        if precision.rows() != c || precision.cols() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                found: precision.rows(),
            });
        }
        Ok(Self {
            layer_index,
            means,
            precision,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    fn quad_form(&self, d: &[f64]) -> f64 {
        let c = d.len();
        let p = self.precision.as_slice();
        let mut total = 0.0;
        for i in 0..c {
            let row = &p[i * c..(i + 1) * c];
            let pd: f64 = row.iter().zip(d).map(|(a, b)| a * b).sum();
            total += d[i] * pd;
        }
        total
    }

    /// Best score and the class attaining it (lowest index on ties).
    pub fn nearest(&self, feature: &[f64]) -> Result<(f64, usize)> {
        if feature.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: feature.len(),
            });
        }
        let mut best = (f64::NEG_INFINITY, 0);
        let mut diff = vec![0.0; self.dim()];
        for (c, mu) in self.means.iter_rows().enumerate() {
            for ((d, f), m) in diff.iter_mut().zip(feature).zip(mu) {
                *d = f - m;
            }
            let s = -self.quad_form(&diff);
            if s > best.0 {
                best = (s, c);
            }
        }
        Ok(best)
    }

    /// `max_c -(f - mu_c)^T P (f - mu_c)`.
    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        Ok(self.nearest(feature)?.0)
    }

    /// Score together with its gradient `-2 P (f - mu_c*)` w.r.t. the feature.
    pub fn score_gradient(&self, feature: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (s, c) = self.nearest(feature)?;
        let mu = self.means.row(c);
        let d: Vec<f64> = feature.iter().zip(mu).map(|(f, m)| f - m).collect();
        let grad = self
            .precision
            .iter_rows()
            .map(|row| -2.0 * row.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok((s, grad))
    }
}

fn invert_spd(cov: &[f64], dim: usize) -> Option<Matrix> {
    let m = DMatrix::from_row_slice(dim, dim, cov);
    let inv = m.cholesky()?.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            out.row_mut(i)[j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
        }
    }
    Some(out)
}

fn fit_layer(
    layer_index: usize,
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    ridge: Ridge,
) -> Result<LayerGaussians> {
    let dim = features.cols();
    let mut counts = vec![0usize; num_classes];
    let mut means = Matrix::zeros(num_classes, dim);
    for (row, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        for (m, v) in means.row_mut(y).iter_mut().zip(row) {
            *m += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for (c, &n) in counts.iter().enumerate() {
        means.row_mut(c).iter_mut().for_each(|m| *m /= n as f64);
    }

    let mut cov = vec![0.0; dim * dim];
    let mut d = vec![0.0; dim];
    for (row, &y) in features.iter_rows().zip(labels) {
        for ((di, v), m) in d.iter_mut().zip(row).zip(means.row(y)) {
            *di = v - m;
        }
        for i in 0..dim {
            let di = d[i];
            for j in i..dim {
                cov[i * dim + j] += di * d[j];
            }
        }
    }
    let n = features.rows() as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / n;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let mut lambda = ridge.lambda(trace, dim);
    for attempt in 0..=RIDGE_RETRIES {
        let mut loaded = cov.clone();
        for i in 0..dim {
            loaded[i * dim + i] += lambda;
        }
        if let Some(precision) = invert_spd(&loaded, dim) {
            if attempt > 0 {
                log::warn!("layer {layer_index}: covariance needed ridge {lambda:e}");
            }
            return LayerGaussians::new(layer_index, means, precision);
        }
        if attempt < RIDGE_RETRIES {
            lambda *= 10.0;
        }
    }
    Err(Error::SingularCovariance {
        layer: layer_index,
        ridge: lambda,
    })
}

/// Fits class means and a regularized tied covariance for every layer.
pub fn fit_gaussians(train: &ActivationArchive, ridge: Ridge) -> Result<Vec<LayerGaussians>> {
    ridge.validate()?;
    let labels = train.label_indices().ok_or(Error::MissingLabels)?;
    let k = train.num_classes();
    train
        .layers()
        .par_iter()
        .enumerate()
        .map(|(l, layer)| {
            let features = spatial_mean(&layer.tensor)?;
            fit_layer(l, &features, &labels, k, ridge)
        })
        .collect()
}

/// Linear combination of layer scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub alphas: Vec<f64>,
    pub bias: f64,
}

impl LayerWeights {
    pub fn uniform(layers: usize) -> Self {
        Self {
            alphas: vec![1.0 / layers as f64; layers],
            bias: 0.0,
        }
    }

    pub fn combine(&self, layer_scores: &[f64]) -> f64 {
        self.alphas
            .iter()
            .zip(layer_scores)
            .map(|(a, s)| a * s)
            .sum::<f64>()
            + self.bias
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression separating in-distribution (label 1) from adversarial
/// (label 0) layer-score vectors, on per-layer standardized inputs. The result
/// is expressed on raw layer scores.
pub fn fit_combiner(in_scores: &Matrix, adv_scores: &Matrix) -> Result<LayerWeights> {
    let layers = in_scores.cols();
    if adv_scores.cols() != layers {
        return Err(Error::LayerMismatch(format!(
            "{layers} in-distribution layer scores vs {} adversarial",
            adv_scores.cols()
        )));
    }
    let n = in_scores.rows() + adv_scores.rows();
    if in_scores.rows() == 0 || adv_scores.rows() == 0 {
        return Err(Error::EmptyArchive);
    }
    let rows = || in_scores.iter_rows().chain(adv_scores.iter_rows());
    let mut mean = vec![0.0; layers];
    for r in rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sd = vec![0.0; layers];
    for r in rows() {
        sd.iter_mut()
            .zip(r)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2));
    }
    for s in sd.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if s.is_nan() || *s <= 0.0 {
            *s = 1.0;
        }
    }
    let standardized: Vec<(Vec<f64>, f64)> = in_scores
        .iter_rows()
        .map(|r| (r, 1.0))
        .chain(adv_scores.iter_rows().map(|r| (r, 0.0)))
        .map(|(r, y)| {
            let x = r
                .iter()
                .zip(&mean)
                .zip(&sd)
                .map(|((v, m), s)| (v - m) / s)
                .collect();
            (x, y)
        })
        .collect();

    let mut w = vec![0.0; layers];
    let mut b = 0.0;
    let mut gw = vec![0.0; layers];
    for _ in 0..COMBINER_EPOCHS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, y) in &standardized {
            let z = w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b;
            let err = sigmoid(z) - y;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += err * v);
            gb += err;
        }
        w.iter_mut()
            .zip(&gw)
            .for_each(|(a, g)| *a -= COMBINER_STEP * g / n as f64);
        b -= COMBINER_STEP * gb / n as f64;
    }
    let alphas: Vec<f64> = w.iter().zip(&sd).map(|(a, s)| a / s).collect();
    let bias = b - alphas.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
    Ok(LayerWeights { alphas, bias })
}

/// Fitted detector.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisModel {
    pub layer_names: Vec<String>,
    pub layers: Vec<LayerGaussians>,
    pub weights: LayerWeights,
    pub noise_magnitude: f64,
    pub ridge: Ridge,
}

impl MahalanobisModel {
    /// Fits the Gaussians with uniform layer weights and no input noise.
    pub fn fit(train: &ActivationArchive, ridge: Ridge) -> Result<Self> {
        let layers = fit_gaussians(train, ridge)?;
        Ok(Self {
            layer_names: train.layer_names(),
            weights: LayerWeights::uniform(layers.len()),
            layers,
            noise_magnitude: 0.0,
            ridge,
        })
    }

    fn check_layers(&self, data: &ActivationArchive) -> Result<()> {
        if data.layers().len() != self.layers.len() {
            return Err(Error::LayerMismatch(format!(
                "model has {} layers, archive has {}",
                self.layers.len(),
                data.layers().len()
            )));
        }
        for (i, (layer, g)) in data.layers().iter().zip(&self.layers).enumerate() {
            if layer.name != self.layer_names[i] {
                return Err(Error::LayerMismatch(format!(
                    "layer {i} is {:?}, model expects {:?}",
                    layer.name, self.layer_names[i]
                )));
            }
            let c = layer.tensor.shape()[1];
            if c != g.dim() {
                return Err(Error::LayerMismatch(format!(
                    "layer {:?} has {c} channels, model expects {}",
                    layer.name,
                    g.dim()
                )));
            }
        }
        Ok(())
    }

    /// `[N, L]` matrix of per-layer scores computed from stored activations.
    pub fn layer_scores(&self, data: &ActivationArchive) -> Result<Matrix> {
        self.check_layers(data)?;
        let features: Vec<Matrix> = data
            .layers()
            .iter()
            .map(|l| spatial_mean(&l.tensor))
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<f64>> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                self.layers
                    .iter()
                    .zip(&features)
                    .map(|(g, f)| g.score(f.row(i)))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows, self.layers.len())
    }

    fn check_net(&self, net: &MicroNet) -> Result<()> {
        let dims = net.hidden_dims();
        if dims.len() != self.layers.len()
            || dims.iter().zip(&self.layers).any(|(d, g)| *d != g.dim())
        {
            return Err(Error::LayerMismatch(format!(
                "network hidden widths {dims:?} do not match model layers"
            )));
        }
        Ok(())
    }

    /// Layer scores of one input after the per-layer perturbation
    /// `x + eps * sign(grad_x M_l(x))`.
    pub fn perturbed_layer_scores(&self, net: &MicroNet, x: &[f64]) -> Result<Vec<f64>> {
        let clean = net.forward(x)?;
        self.layers
            .iter()
            .enumerate()
            .map(|(l, g)| {
                let feature = clean.hidden(l);
                if self.noise_magnitude == 0.0 {
                    return g.score(feature);
                }
                let (_, grad) = g.score_gradient(feature)?;
                let gx = net.input_gradient(x, &GradientTarget::Layer { index: l, grad })?;
                let shifted: Vec<f64> = x
                    .iter()
                    .zip(&gx)
                    .map(|(xi, gi)| xi + self.noise_magnitude * sign(*gi))
                    .collect();
                g.score(net.forward(&shifted)?.hidden(l))
            })
            .collect()
    }

    /// `[N, L]` layer scores computed end to end through `net`, with input noise.
    pub fn layer_scores_with_net(&self, net: &MicroNet, inputs: &Matrix) -> Result<Matrix> {
        self.check_net(net)?;
        let rows: Vec<Vec<f64>> = (0..inputs.rows())
            .into_par_iter()
            .map(|i| self.perturbed_layer_scores(net, inputs.row(i)))
            .collect::<Result<_>>()?;
        Matrix::from_rows(&rows, self.layers.len())
    }

    fn combine_all(&self, layer_scores: &Matrix) -> Result<ScoreSeries> {
        let values = layer_scores
            .iter_rows()
            .map(|r| self.weights.combine(r))
            .collect();
        ScoreSeries::new("mahalanobis", values)
    }

    /// Canonical scores from stored activations.
    pub fn score(&self, data: &ActivationArchive) -> Result<ScoreSeries> {
        self.combine_all(&self.layer_scores(data)?)
    }

    /// Canonical scores computed through `net`, applying the configured input noise.
    pub fn score_with_net(&self, net: &MicroNet, inputs: &Matrix) -> Result<ScoreSeries> {
        self.combine_all(&self.layer_scores_with_net(net, inputs)?)
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fits the layer combiner on in-distribution vs adversarial activations.
pub fn fit_layer_weights(
    in_dist: &ActivationArchive,
    adversarial: &ActivationArchive,
    model: &MahalanobisModel,
) -> Result<LayerWeights> {
    let a = model.layer_scores(in_dist)?;
    let b = model.layer_scores(adversarial)?;
    fit_combiner(&a, &b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSearch {
    pub noise_magnitude: f64,
    pub weights: LayerWeights,
    pub auroc: f64,
}

/// Picks the noise magnitude (first best in grid order) whose fitted combiner
/// best separates in-distribution inputs from their adversarial counterparts.
pub fn search_noise_magnitude(
    model: &MahalanobisModel,
    net: &MicroNet,
    in_inputs: &Matrix,
    adv_inputs: &Matrix,
    grid: &[f64],
) -> Result<NoiseSearch> {
    let mut best: Option<NoiseSearch> = None;
    for &eps in grid {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise magnitude {eps} invalid"
            )));
        }
        let candidate = MahalanobisModel {
            noise_magnitude: eps,
            ..model.clone()
        };
        let a = candidate.layer_scores_with_net(net, in_inputs)?;
        let b = candidate.layer_scores_with_net(net, adv_inputs)?;
        let weights = fit_combiner(&a, &b)?;
        let sa: Vec<f64> = a.iter_rows().map(|r| weights.combine(r)).collect();
        let sb: Vec<f64> = b.iter_rows().map(|r| weights.combine(r)).collect();
        let area = auroc(&sa, &sb)?;
        if best.as_ref().is_none_or(|b| area > b.auroc) {
            best = Some(NoiseSearch {
                noise_magnitude: eps,
                weights,
                auroc: area,
            });
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("empty noise grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Layer;
    use crate::tensor::TensorBuffer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn archive(features: Vec<f64>, dim: usize, labels: Vec<i64>, k: usize) -> ActivationArchive {
        let n = labels.len();
        ActivationArchive::new(
            vec![Layer {
                name: "f".into(),
                tensor: TensorBuffer::from_f64(vec![n, dim], features).unwrap(),
            }],
            TensorBuffer::from_f64(vec![n, k], vec![0.0; n * k]).unwrap(),
            Some(TensorBuffer::from_i64(vec![n], labels).unwrap()),
            None,
        )
        .unwrap()
    }

    fn gauss_jordan_inverse(a: &[f64], n: usize) -> Vec<f64> {
        let mut m = a.to_vec();
        let mut inv: Vec<f64> = (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
                .unwrap();
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
                inv.swap(col * n + k, piv * n + k);
            }
            let p = m[col * n + col];
            for k in 0..n {
                m[col * n + k] /= p;
                inv[col * n + k] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[r * n + col];
                    for k in 0..n {
                        m[r * n + k] -= f * m[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn zero_scatter_gives_pure_ridge() {
        let a = archive(
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
            2,
            vec![0, 0, 1, 1],
            2,
        );
        let g = &fit_gaussians(&a, Ridge::Fixed(0.5)).unwrap()[0];
        assert_eq!(g.means.as_slice(), &[0.0, 0.0, 1.0, 1.0]);
        let close =
            |got: &[f64], want: [f64; 4]| got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
        assert!(close(g.precision.as_slice(), [2.0, 0.0, 0.0, 2.0]));
        // trace is zero, so the scaled ridge falls back to its factor
        let g = &fit_gaussians(&a, Ridge::TraceScaled(0.25)).unwrap()[0];
        assert!(close(g.precision.as_slice(), [4.0, 0.0, 0.0, 4.0]));
    }

    #[test]
    fn precision_matches_direct_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in 1..=8 {
            let n = 40;
            let feats: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
            let a = archive(feats.clone(), dim, labels.clone(), 3);
            let g = &fit_gaussians(&a, Ridge::Fixed(1.0)).unwrap()[0];

            // independent covariance
            let mut mu = vec![vec![0.0; dim]; 3];
            let mut cnt = [0.0; 3];
            for i in 0..n {
                let c = labels[i] as usize;
                cnt[c] += 1.0;
                for j in 0..dim {
                    mu[c][j] += feats[i * dim + j];
                }
            }
            for c in 0..3 {
                mu[c].iter_mut().for_each(|m| *m /= cnt[c]);
            }
            let mut cov = vec![0.0; dim * dim];
            for i in 0..n {
                let c = labels[i] as usize;
                for r in 0..dim {
                    for s in 0..dim {
                        cov[r * dim + s] += (feats[i * dim + r] - mu[c][r])
                            * (feats[i * dim + s] - mu[c][s])
                            / n as f64;
                    }
                }
            }
            for r in 0..dim {
                cov[r * dim + r] += 1.0;
            }
            let inv = gauss_jordan_inverse(&cov, dim);
            for (a, b) in g.precision.as_slice().iter().zip(&inv) {
                assert!((a - b).abs() < 1e-10, "dim {dim}: {a} vs {b}");
            }
            for r in 0..dim {
                for s in 0..dim {
                    assert_eq!(g.precision.get(r, s), g.precision.get(s, r));
                }
            }
        }
    }

    #[test]
    fn empty_class_and_missing_labels() {
        let a = archive(vec![0.0, 1.0, 2.0, 3.0], 1, vec![0, 0, 0, 0], 2);
        assert!(matches!(
            fit_gaussians(&a, Ridge::default()),
            Err(Error::EmptyClass(1))
        ));
        let unlabeled =
            ActivationArchive::new(a.layers().to_vec(), a.logits().clone(), None, None).unwrap();
        assert!(matches!(
            fit_gaussians(&unlabeled, Ridge::default()),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn singular_covariance_after_retries() {
        // a Fixed ridge far below the f64 resolution of a huge diagonal still
        // loads the diagonal; a NaN feature makes every attempt fail
        let a = archive(vec![f64::NAN, 0.0, 1.0, 2.0], 1, vec![0, 0, 1, 1], 2);
        assert!(matches!(
            fit_gaussians(&a, Ridge::Fixed(1e-3)),
            Err(Error::SingularCovariance { layer: 0, .. })
        ));
    }

    fn identity_gaussians(means: Vec<f64>, dim: usize) -> LayerGaussians {
        let k = means.len() / dim;
        let mut p = Matrix::zeros(dim, dim);
        for i in 0..dim {
            p.row_mut(i)[i] = 1.0;
        }
        LayerGaussians::new(0, Matrix::new(k, dim, means).unwrap(), p).unwrap()
    }

    #[test]
    fn layer_score_examples() {
        let g = identity_gaussians(vec![0.0, 0.0, 4.0, 0.0], 2);
        assert_eq!(g.score(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(g.score(&[1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(g.score(&[3.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            g.score(&[1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                found: 1
            })
        ));
    }

    #[test]
    fn layer_score_matches_per_class_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let (k, dim) = (rng.random_range(2..5), rng.random_range(1..5));
            // P = A A^T + I is positive definite
            let a: Vec<f64> = (0..dim * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut p = Matrix::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    let v: f64 = (0..dim).map(|t| a[i * dim + t] * a[j * dim + t]).sum();
                    p.row_mut(i)[j] = v + if i == j { 1.0 } else { 0.0 };
                }
            }
            let means: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = LayerGaussians::new(0, Matrix::new(k, dim, means.clone()).unwrap(), p.clone())
                .unwrap();
            let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut oracle = f64::NEG_INFINITY;
            for c in 0..k {
                let mut q = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        q +=
                            (f[i] - means[c * dim + i]) * p.get(i, j) * (f[j] - means[c * dim + j]);
                    }
                }
                oracle = oracle.max(-q);
            }
            assert!((g.score(&f).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let dim = 3;
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0))
                + DMatrix::identity(dim, dim) * 2.0;
            let a_inv = a.clone().try_inverse().unwrap();
            let g = identity_gaussians(
                (0..2 * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                dim,
            );
            let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            // means -> A mu, precision -> A^-T P A^-1
            let p2 = a_inv.transpose() * a_inv.clone();
            let mut means2 = Vec::new();
            for mu in g.means.iter_rows() {
                let v = &a * nalgebra::DVector::from_column_slice(mu);
                means2.extend(v.iter());
            }
            let mut pm = Matrix::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    pm.row_mut(i)[j] = p2[(i, j)];
                }
            }
            let g2 = LayerGaussians::new(0, Matrix::new(2, dim, means2).unwrap(), pm).unwrap();
            let f2 = &a * nalgebra::DVector::from_column_slice(&f);
            let f2: Vec<f64> = f2.iter().copied().collect();
            assert!((g.score(&f).unwrap() - g2.score(&f2).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn score_gradient_matches_finite_difference() {
        let g = identity_gaussians(vec![0.0, 0.0, 4.0, 1.0], 2);
        let f = [1.0, 0.5];
        let (_, grad) = g.score_gradient(&f).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut a = f;
            let mut b = f;
            a[i] += h;
            b[i] -= h;
            let fd = (g.score(&a).unwrap() - g.score(&b).unwrap()) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn class_order_does_not_matter(
            means in prop::collection::vec(-5.0f64..5.0, 6),
            f in prop::collection::vec(-5.0f64..5.0, 2),
        ) {
            let g = identity_gaussians(means.clone(), 2);
            let mut swapped = means[4..].to_vec();
            swapped.extend_from_slice(&means[..4]);
            let g2 = identity_gaussians(swapped, 2);
            prop_assert_eq!(g.score(&f).unwrap(), g2.score(&f).unwrap());
        }

        #[test]
        fn zero_only_at_means(
            means in prop::collection::vec(-5.0f64..5.0, 4),
            f in prop::collection::vec(-5.0f64..5.0, 2),
            pick in 0usize..2,
        ) {
            let g = identity_gaussians(means.clone(), 2);
            prop_assert_eq!(g.score(&means[pick * 2..pick * 2 + 2]).unwrap(), 0.0);
            let at_mean = (0..2).any(|c| (means[c*2] - f[0]).abs() < 1e-12 && (means[c*2+1] - f[1]).abs() < 1e-12);
            let s = g.score(&f).unwrap();
            prop_assert!(s <= 0.0);
            if !at_mean { prop_assert!(s < 0.0); }
        }

        #[test]
        fn moving_away_from_nearest_mean_never_increases(t1 in 0.0f64..5.0, dt in 0.0f64..5.0,
                                                          dir in 0.0f64..std::f64::consts::TAU) {
            let g = identity_gaussians(vec![0.0, 0.0, 100.0, 100.0], 2);
            let (c, s) = (dir.cos(), dir.sin());
            let a = g.score(&[t1 * c, t1 * s]).unwrap();
            let b = g.score(&[(t1 + dt) * c, (t1 + dt) * s]).unwrap();
            prop_assert!(b <= a);
        }
    }

    fn scores_matrix(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows, rows[0].len()).unwrap()
    }

    #[test]
    fn separable_combiner_has_nonnegative_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![rng.random_range(-1.0..0.0), rng.random_range(-2.0..0.0)])
            .collect();
        let adv: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![rng.random_range(-9.0..-5.0), rng.random_range(-20.0..-10.0)])
            .collect();
        let w = fit_combiner(&scores_matrix(&ins), &scores_matrix(&adv)).unwrap();
        assert!(w.alphas.iter().all(|&a| a >= 0.0));
        let a: Vec<f64> = ins.iter().map(|r| w.combine(r)).collect();
        let b: Vec<f64> = adv.iter().map(|r| w.combine(r)).collect();
        assert_eq!(auroc(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn identical_sides_give_chance_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|_| vec![rng.random_range(-3.0..0.0), rng.random_range(-3.0..0.0)])
            .collect();
        let m = scores_matrix(&rows);
        let w = fit_combiner(&m, &m).unwrap();
        let s: Vec<f64> = rows.iter().map(|r| w.combine(r)).collect();
        assert!((auroc(&s, &s).unwrap() - 0.5).abs() <= 0.05);
    }

    #[test]
    fn single_layer_combiner_preserves_ranking() {
        let ins: Vec<Vec<f64>> = (0..30).map(|i| vec![-(i as f64) * 0.1]).collect();
        let adv: Vec<Vec<f64>> = (0..30).map(|i| vec![-2.0 - i as f64 * 0.3]).collect();
        let w = fit_combiner(&scores_matrix(&ins), &scores_matrix(&adv)).unwrap();
        assert!(w.alphas[0] > 0.0);
        let all: Vec<f64> = ins.iter().chain(&adv).map(|r| r[0]).collect();
        let comb: Vec<f64> = all.iter().map(|&v| w.combine(&[v])).collect();
        for i in 0..all.len() {
            for j in 0..all.len() {
                assert_eq!(all[i] < all[j], comb[i] < comb[j]);
            }
        }
    }

    #[test]
    fn uniform_single_layer_score_is_layer_score() {
        let a = archive(
            vec![0.0, 0.0, 1.0, 0.2, 5.0, 5.0, 6.0, 5.5],
            2,
            vec![0, 0, 1, 1],
            2,
        );
        let m = MahalanobisModel::fit(&a, Ridge::default()).unwrap();
        assert_eq!(
            m.weights,
            LayerWeights {
                alphas: vec![1.0],
                bias: 0.0
            }
        );
        let s = m.score(&a).unwrap();
        let feats = spatial_mean(&a.layers()[0].tensor).unwrap();
        for (i, v) in s.values().iter().enumerate() {
            assert_eq!(*v, m.layers[0].score(feats.row(i)).unwrap());
            assert!(*v <= 0.0);
        }
    }

    #[test]
    fn far_sample_scores_below_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let centre = if c == 0 { 0.0 } else { 10.0 };
            feats.push(centre + rng.random_range(-1.0..1.0));
            feats.push(rng.random_range(-1.0..1.0));
            labels.push(c as i64);
        }
        let a = archive(feats, 2, labels, 2);
        let m = MahalanobisModel::fit(&a, Ridge::default()).unwrap();
        let train_min = m
            .score(&a)
            .unwrap()
            .values()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let far = archive(vec![5.0, 30.0], 2, vec![0], 2);
        assert!(m.score(&far).unwrap().values()[0] < train_min);
    }

    #[test]
    fn mismatched_archive_rejected() {
        let a = archive(vec![0.0, 0.0, 1.0, 1.0], 1, vec![0, 0, 1, 1], 2);
        let m = MahalanobisModel::fit(&a, Ridge::default()).unwrap();
        let b = archive(vec![0.0; 8], 2, vec![0, 0, 1, 1], 2);
        assert!(matches!(m.score(&b), Err(Error::LayerMismatch(_))));
    }
}
