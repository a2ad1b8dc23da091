//! A small dense ReLU classifier with exact input gradients, used to produce
//! activations end to end and to craft FGSM samples.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{read_json, read_tensor, write_json, write_tensor, ActivationArchive, Layer};
use crate::error::{Error, Result};
use crate::mahalanobis::sign;
use crate::numeric::{log_sum_exp, softmax};
use crate::tensor::{Matrix, TensorBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative at a pre-activation value; the ReLU kink counts as 0.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(W x + b)` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }
}

/// Pre- and post-activation values of every layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn logits(&self) -> &[f64] {
        self.post.last().expect("network has at least one layer")
    }

    /// Post-activation output of layer `l`.
    pub fn hidden(&self, l: usize) -> &[f64] {
        &self.post[l]
    }
}

/// What to differentiate with respect to the input.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientTarget {
    /// Cross-entropy of the softmax over the logits against `label`.
    CrossEntropy { label: usize },
    /// A functional of layer `index`'s output, given its gradient there.
    Layer { index: usize, grad: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetManifest {
    layers: Vec<NetLayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetLayerEntry {
    weights: String,
    bias: String,
    activation: Activation,
}

impl MicroNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::InvalidConfig("network needs at least one layer".into()))?;
        if last.activation != Activation::Identity {
            return Err(Error::InvalidConfig(
                "last layer must be identity (logits)".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    found: pair[1].in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// ReLU hidden layers and identity logits, weights and biases drawn
    /// uniformly from `+-1/sqrt(fan_in)`.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights: Vec<f64> = (0..out * fan_in)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias: Vec<f64> = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::new(Matrix::new(out, fan_in, weights).unwrap(), bias, act).unwrap()
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Widths of the hidden (non-logit) layers.
    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(DenseLayer::out_dim)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().map_or(x, |v| v.as_slice());
            let z = layer.affine(input);
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardPass { pre, post })
    }

    /// Backpropagates `grad` (w.r.t. the output of layer `start`) down to the
    /// input, optionally accumulating parameter gradients.
    fn backward(
        &self,
        x: &[f64],
        pass: &ForwardPass,
        start: usize,
        mut grad: Vec<f64>,
        mut params: Option<&mut [(Vec<f64>, Vec<f64>)]>,
    ) -> Vec<f64> {
        for l in (0..=start).rev() {
            let layer = &self.layers[l];
            let g_pre: Vec<f64> = grad
                .iter()
                .zip(&pass.pre[l])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let input = if l == 0 { x } else { &pass.post[l - 1] };
            if let Some(params) = params.as_deref_mut() {
                let (gw, gb) = &mut params[l];
                let cols = layer.in_dim();
                for (o, &gp) in g_pre.iter().enumerate() {
                    gb[o] += gp;
                    if gp != 0.0 {
                        for (w, v) in gw[o * cols..(o + 1) * cols].iter_mut().zip(input) {
                            *w += gp * v;
                        }
                    }
                }
            }
            let mut g_in = vec![0.0; layer.in_dim()];
            for (w, &gp) in layer.weights.iter_rows().zip(&g_pre) {
                if gp != 0.0 {
                    for (gi, wi) in g_in.iter_mut().zip(w) {
                        *gi += gp * wi;
                    }
                }
            }
            grad = g_in;
        }
        grad
    }

    fn upstream(&self, pass: &ForwardPass, target: &GradientTarget) -> Result<(usize, Vec<f64>)> {
        match target {
            GradientTarget::CrossEntropy { label } => {
                let k = self.num_classes();
                if *label >= k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        found: *label,
                    });
                }
                let mut g = softmax(pass.logits());
                g[*label] -= 1.0;
                Ok((self.layers.len() - 1, g))
            }
            GradientTarget::Layer { index, grad } => {
                let layer = self.layers.get(*index).ok_or(Error::DimensionMismatch {
                    expected: self.layers.len(),
                    found: *index,
                })?;
                if grad.len() != layer.out_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: layer.out_dim(),
                        found: grad.len(),
                    });
                }
                Ok((*index, grad.clone()))
            }
        }
    }

    /// Exact gradient of the target with respect to the input `x`.
    pub fn input_gradient(&self, x: &[f64], target: &GradientTarget) -> Result<Vec<f64>> {
        let pass = self.forward(x)?;
        let (start, grad) = self.upstream(&pass, target)?;
        Ok(self.backward(x, &pass, start, grad, None))
    }

    pub fn cross_entropy(&self, x: &[f64], label: usize) -> Result<f64> {
        let pass = self.forward(x)?;
        let logits = pass.logits();
        if label >= logits.len() {
            return Err(Error::DimensionMismatch {
                expected: logits.len(),
                found: label,
            });
        }
        Ok(log_sum_exp(logits) - logits[label])
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::numeric::argmax(self.forward(x)?.logits()))
    }

    /// Writes `manifest.json` plus `w_{l}.npy` / `b_{l}.npy` per layer.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = (format!("w_{l}.npy"), format!("b_{l}.npy"));
            write_tensor(&dir.join(&w), &layer.weights.to_tensor())?;
            write_tensor(
                &dir.join(&b),
                &TensorBuffer::from_f64(vec![layer.bias.len()], layer.bias.clone())?,
            )?;
            entries.push(NetLayerEntry {
                weights: w,
                bias: b,
                activation: layer.activation,
            });
        }
        write_json(&dir.join("manifest.json"), &NetManifest { layers: entries })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: NetManifest = read_json(&dir.join("manifest.json"))?;
        let layers = manifest
            .layers
            .iter()
            .map(|e| {
                let w = Matrix::from_tensor(&read_tensor(&dir.join(&e.weights))?)?;
                let b = read_tensor(&dir.join(&e.bias))?.to_f64_vec();
                DenseLayer::new(w, b, e.activation)
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }
}

/// One-step L-infinity attack: `x + eps * sign(d CE / dx)`, with `sign(0) = 0`.
pub fn fgsm(net: &MicroNet, x: &[f64], label: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    let g = net.input_gradient(x, &GradientTarget::CrossEntropy { label })?;
    Ok(x.iter()
        .zip(&g)
        .map(|(v, gi)| v + epsilon * sign(*gi))
        .collect())
}

/// FGSM applied to every row.
pub fn fgsm_batch(net: &MicroNet, data: &Dataset, epsilon: f64) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = data
        .inputs
        .iter_rows()
        .zip(&data.labels)
        .map(|(x, &y)| fgsm(net, x, y, epsilon))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows, data.inputs.cols())
}

/// Labeled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Per-sample SGD on cross-entropy, reshuffling every epoch.
pub fn train(net: &MicroNet, data: &Dataset, config: &TrainConfig) -> Result<MicroNet> {
    if data.inputs.cols() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            found: data.inputs.cols(),
        });
    }
    let mut net = net.clone();
    if config.learning_rate == 0.0 {
        return Ok(net);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = net
        .layers
        .iter()
        .map(|l| {
            (
                vec![0.0; l.weights.as_slice().len()],
                vec![0.0; l.bias.len()],
            )
        })
        .collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = data.inputs.row(i);
            let pass = net.forward(x)?;
            let (start, g) = net.upstream(
                &pass,
                &GradientTarget::CrossEntropy {
                    label: data.labels[i],
                },
            )?;
            for (gw, gb) in grads.iter_mut() {
                gw.iter_mut().for_each(|v| *v = 0.0);
                gb.iter_mut().for_each(|v| *v = 0.0);
            }
            net.backward(x, &pass, start, g, Some(&mut grads));
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(&grads) {
                let cols = layer.in_dim();
                for o in 0..layer.out_dim() {
                    let row = layer.weights.row_mut(o);
                    for (w, g) in row.iter_mut().zip(&gw[o * cols..(o + 1) * cols]) {
                        *w -= config.learning_rate * g;
                    }
                    layer.bias[o] -= config.learning_rate * gb[o];
                }
            }
        }
    }
    Ok(net)
}

/// Runs `net` over `inputs` and packs hidden activations, logits, optional
/// labels and the raw inputs into an archive.
pub fn to_archive(
    net: &MicroNet,
    inputs: &Matrix,
    labels: Option<&[usize]>,
) -> Result<ActivationArchive> {
    let n = inputs.rows();
    let hidden = net.hidden_dims();
    let mut layer_data: Vec<Vec<f64>> = hidden.iter().map(|h| Vec::with_capacity(n * h)).collect();
    let mut logits = Vec::with_capacity(n * net.num_classes());
    for x in inputs.iter_rows() {
        let pass = net.forward(x)?;
        for (l, buf) in layer_data.iter_mut().enumerate() {
            buf.extend_from_slice(pass.hidden(l));
        }
        logits.extend_from_slice(pass.logits());
    }
    let layers = layer_data
        .into_iter()
        .zip(&hidden)
        .enumerate()
        .map(|(l, (data, &h))| {
            Ok(Layer {
                name: format!("dense_{l}"),
                tensor: TensorBuffer::from_f64(vec![n, h], data)?,
            })
        })
        .collect::<Result<_>>()?;
    let labels = labels
        .map(|ls| TensorBuffer::from_i64(vec![ls.len()], ls.iter().map(|&l| l as i64).collect()))
        .transpose()?;
    ActivationArchive::new(
        layers,
        TensorBuffer::from_f64(vec![n, net.num_classes()], logits)?,
        labels,
        Some(inputs.to_tensor()),
    )
}

/// Kind of out-of-distribution cluster a task generates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OodKind {
    /// A cluster whose centre is `distance` sigmas from the nearest class centre.
    Far { distance: f64 },
    /// Clusters around midpoints between pairs of class centres, with noise
    /// `spread` times the in-distribution sigma.
    Near { spread: f64 },
}

/// Gaussian-blob classification task with an OOD companion cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub ood: OodKind,
    pub seed: u64,
}

/// Samples drawn from a [`SyntheticTask`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTask {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Matrix,
}

/// Archives produced by running a trained net over a [`SampledTask`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskArchives {
    pub train: ActivationArchive,
    pub test: ActivationArchive,
    pub ood: ActivationArchive,
}

impl SyntheticTask {
    /// `num_classes` centres at distance `radius` from the origin along distinct
    /// coordinate axes (`dim >= num_classes`).
    pub fn blobs(
        num_classes: usize,
        dim: usize,
        radius: f64,
        sigma: f64,
        ood: OodKind,
        seed: u64,
    ) -> Result<Self> {
        if dim < num_classes {
            return Err(Error::InvalidConfig(format!(
                "dim {dim} must be >= num_classes {num_classes}"
            )));
        }
        let centers = (0..num_classes)
            .map(|c| {
                let mut v = vec![0.0; dim];
                v[c] = radius;
                v
            })
            .collect();
        let task = Self {
            centers,
            sigma,
            ood,
            seed,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.len() < 2 {
            return Err(Error::InvalidConfig("need at least two centres".into()));
        }
        let dim = self.dim();
        if self.centers.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidConfig("centres differ in dimension".into()));
        }
        for (i, a) in self.centers.iter().enumerate() {
            for b in &self.centers[i + 1..] {
                if a == b {
                    return Err(Error::InvalidConfig("centres must be distinct".into()));
                }
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        match self.ood {
            OodKind::Far { distance } if !(distance.is_finite() && distance > 0.0) => Err(
                Error::InvalidConfig(format!("far distance {distance} invalid")),
            ),
            OodKind::Near { spread } if !(spread.is_finite() && spread > 0.0) => Err(
                Error::InvalidConfig(format!("near spread {spread} invalid")),
            ),
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    fn centroid(&self) -> Vec<f64> {
        let k = self.num_classes() as f64;
        (0..self.dim())
            .map(|j| self.centers.iter().map(|c| c[j]).sum::<f64>() / k)
            .collect()
    }

    /// Centre of the far cluster, `distance * sigma` from every centre that is
    /// equidistant from the centroid.
    ///
    /// The cluster moves off the centroid along the normal of the centres'
    /// affine hull, on the side of the origin; if the origin lies in the hull
    /// it moves along any direction orthogonal to the centres' span, and if
    /// the centres span the space it moves directly away from the first centre.
    pub fn far_center(&self, distance: f64) -> Vec<f64> {
        let centroid = self.centroid();
        let dim = self.dim();
        let mut hull: Vec<Vec<f64>> = Vec::new();
        for c in &self.centers[1..] {
            let edge: Vec<f64> = c.iter().zip(&self.centers[0]).map(|(a, b)| a - b).collect();
            push_orthonormal(&mut hull, edge);
        }
        let toward_origin: Vec<f64> = centroid.iter().map(|v| -v).collect();
        let mut normal = hull.clone();
        let dir = if push_orthonormal(&mut normal, toward_origin) {
            normal.pop()
        } else {
            let mut span: Vec<Vec<f64>> = Vec::new();
            for c in &self.centers {
                push_orthonormal(&mut span, c.clone());
            }
            (0..dim).rev().find_map(|j| {
                let mut e = vec![0.0; dim];
                e[j] = 1.0;
                let mut b = span.clone();
                push_orthonormal(&mut b, e).then(|| b.pop().unwrap())
            })
        };
        let radius = self
            .centers
            .iter()
            .map(|c| dist(c, &centroid))
            .fold(0.0, f64::max);
        let target = distance * self.sigma;
        match dir {
            Some(u) => {
                let t = (target * target - radius * radius).max(0.0).sqrt();
                centroid.iter().zip(&u).map(|(c, d)| c + t * d).collect()
            }
            None => {
                let away: Vec<f64> = centroid
                    .iter()
                    .zip(&self.centers[0])
                    .map(|(c, m)| c - m)
                    .collect();
                let norm = away
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                centroid
                    .iter()
                    .zip(&away)
                    .map(|(c, a)| c + (target + radius) * a / norm)
                    .collect()
            }
        }
    }

    /// Draws `n_per_class` train and test samples per class and `n_ood` OOD samples.
    pub fn sample(&self, n_per_class: usize, n_ood: usize) -> Result<SampledTask> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
        let dim = self.dim();
        let draw = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            center.iter().map(|c| c + normal.sample(rng)).collect()
        };
        let split = |rng: &mut ChaCha8Rng| -> Result<Dataset> {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n_per_class {
                for (c, center) in self.centers.iter().enumerate() {
                    rows.push(draw(center, rng));
                    labels.push(c);
                }
            }
            Ok(Dataset {
                inputs: Matrix::from_rows(&rows, dim)?,
                labels,
            })
        };
        let train = split(&mut rng)?;
        let test = split(&mut rng)?;
        let k = self.num_classes();
        let (far, spread) = match self.ood {
            OodKind::Far { distance } => (Some(self.far_center(distance)), 1.0),
            OodKind::Near { spread } => (None, spread),
        };
        let ood_rows: Vec<Vec<f64>> = (0..n_ood)
            .map(|_| {
                let center = match &far {
                    Some(c) => c.clone(),
                    None => {
                        let a = rng.random_range(0..k);
                        let b = (a + rng.random_range(1..k)) % k;
                        midpoint(&self.centers[a], &self.centers[b])
                    }
                };
                center
                    .iter()
                    .map(|c| c + spread * normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(SampledTask {
            train,
            test,
            ood: Matrix::from_rows(&ood_rows, dim)?,
        })
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn midpoint(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Orthonormalizes `v` against `basis` and appends it if it is independent.
fn push_orthonormal(basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>) -> bool {
    for b in basis.iter() {
        let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    basis.push(v);
    true
}

/// Samples `task` and runs `net` over every split.
pub fn generate_task(
    task: &SyntheticTask,
    net: &MicroNet,
    n_per_class: usize,
    n_ood: usize,
) -> Result<TaskArchives> {
    let s = task.sample(n_per_class, n_ood)?;
    Ok(TaskArchives {
        train: to_archive(net, &s.train.inputs, Some(&s.train.labels))?,
        test: to_archive(net, &s.test.inputs, Some(&s.test.labels))?,
        ood: to_archive(net, &s.ood, None)?,
    })
}
