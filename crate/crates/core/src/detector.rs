//! A fitted detector of any method plus its calibration, and its on-disk form.
//!
//! A model directory holds `manifest.json` (with a `method` tag), the method's
//! NPY tensors, and `calibration.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{read_json, read_tensor, write_json, write_tensor, ActivationArchive};
use crate::calibration::{fit_calibration, CalibrationMap};
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::gram::{upper_len, Bounds, GramProfile};
use crate::mahalanobis::{LayerGaussians, LayerWeights, MahalanobisModel, Ridge};
use crate::metrics::ScoreSeries;
use crate::tensor::{Matrix, TensorBuffer};

pub const CALIBRATION_FILE: &str = "calibration.json";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mahalanobis,
    Gram,
    Energy,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mahalanobis => "mahalanobis",
            Method::Gram => "gram",
            Method::Energy => "energy",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(Method::Mahalanobis),
            "gram" => Ok(Method::Gram),
            "energy" => Ok(Method::Energy),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Detector {
    Mahalanobis(MahalanobisModel),
    Gram(GramProfile),
    Energy(EnergyConfig),
}

impl Detector {
    pub fn method(&self) -> Method {
        match self {
            Detector::Mahalanobis(_) => Method::Mahalanobis,
            Detector::Gram(_) => Method::Gram,
            Detector::Energy(_) => Method::Energy,
        }
    }

    /// Canonical scores (higher = more in-distribution).
    pub fn score(&self, data: &ActivationArchive) -> Result<ScoreSeries> {
        match self {
            Detector::Mahalanobis(m) => m.score(data),
            Detector::Gram(g) => g.score(data),
            Detector::Energy(e) => e.score(data),
        }
    }

    /// The method's own OOD decision for a canonical score, if it has one.
    /// Mahalanobis has no intrinsic threshold and defers to calibration.
    pub fn native_is_ood(&self, canonical: f64) -> Option<bool> {
        match self {
            Detector::Mahalanobis(_) => None,
            Detector::Gram(g) => Some(g.is_ood(-canonical)),
            Detector::Energy(e) => Some(e.is_ood(-canonical)),
        }
    }
}

/// A detector together with its confidence calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDetector {
    pub detector: Detector,
    pub calibration: CalibrationMap,
}

/// One scored sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub canonical_score: f64,
    pub confidence: f64,
    pub is_ood: bool,
}

impl FittedDetector {
    pub fn is_ood(&self, canonical: f64) -> bool {
        self.detector
            .native_is_ood(canonical)
            .unwrap_or(canonical < self.calibration.tau)
    }

    pub fn score_samples(&self, data: &ActivationArchive) -> Result<Vec<ScoredSample>> {
        Ok(self
            .detector
            .score(data)?
            .values()
            .iter()
            .map(|&s| ScoredSample {
                canonical_score: s,
                confidence: self.calibration.confidence(s),
                is_ood: self.is_ood(s),
            })
            .collect())
    }

    /// Refits the calibration on fresh in-distribution data.
    pub fn recalibrate(&mut self, in_dist: &ActivationArchive) -> Result<()> {
        let scores = self.detector.score(in_dist)?;
        self.calibration = fit_calibration(scores.values())?;
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        match &self.detector {
            Detector::Mahalanobis(m) => save_mahalanobis(m, dir)?,
            Detector::Gram(g) => save_gram(g, dir)?,
            Detector::Energy(e) => write_json(
                &dir.join(MANIFEST_FILE),
                &EnergyManifest {
                    method: Method::Energy,
                    temperature: e.temperature,
                    threshold: e.threshold,
                },
            )?,
        }
        write_json(&dir.join(CALIBRATION_FILE), &self.calibration)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw: serde_json::Value = read_json(&manifest_path)?;
        let method: Method = raw
            .get("method")
            .and_then(|m| m.as_str())
            .ok_or_else(|| {
                Error::InvalidModel(format!("{} has no method", manifest_path.display()))
            })?
            .parse()?;
        let detector = match method {
            Method::Mahalanobis => Detector::Mahalanobis(load_mahalanobis(
                serde_json::from_value(raw).map_err(|e| Error::json(&manifest_path, e))?,
                dir,
            )?),
            Method::Gram => Detector::Gram(load_gram(
                serde_json::from_value(raw).map_err(|e| Error::json(&manifest_path, e))?,
                dir,
            )?),
            Method::Energy => {
                let m: EnergyManifest =
                    serde_json::from_value(raw).map_err(|e| Error::json(&manifest_path, e))?;
                Detector::Energy(EnergyConfig {
                    temperature: m.temperature,
                    threshold: m.threshold,
                })
            }
        };
        let calibration = read_json(&dir.join(CALIBRATION_FILE))?;
        Ok(Self {
            detector,
            calibration,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnergyManifest {
    method: Method,
    temperature: f64,
    threshold: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MahalanobisManifest {
    method: Method,
    ridge: Ridge,
    noise_magnitude: f64,
    layers: Vec<String>,
    weights: LayerWeights,
}

fn save_mahalanobis(m: &MahalanobisModel, dir: &Path) -> Result<()> {
    for (l, g) in m.layers.iter().enumerate() {
        write_tensor(&dir.join(format!("mu_{l}.npy")), &g.means.to_tensor())?;
        write_tensor(
            &dir.join(format!("precision_{l}.npy")),
            &g.precision.to_tensor(),
        )?;
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &MahalanobisManifest {
            method: Method::Mahalanobis,
            ridge: m.ridge,
            noise_magnitude: m.noise_magnitude,
            layers: m.layer_names.clone(),
            weights: m.weights.clone(),
        },
    )
}

fn load_mahalanobis(manifest: MahalanobisManifest, dir: &Path) -> Result<MahalanobisModel> {
    if manifest.weights.alphas.len() != manifest.layers.len() {
        return Err(Error::InvalidModel(format!(
            "{} weights for {} layers",
            manifest.weights.alphas.len(),
            manifest.layers.len()
        )));
    }
    let layers = (0..manifest.layers.len())
        .map(|l| {
            let means = Matrix::from_tensor(&read_tensor(&dir.join(format!("mu_{l}.npy")))?)?;
            let precision =
                Matrix::from_tensor(&read_tensor(&dir.join(format!("precision_{l}.npy")))?)?;
            LayerGaussians::new(l, means, precision)
        })
        .collect::<Result<_>>()?;
    Ok(MahalanobisModel {
        layer_names: manifest.layers,
        layers,
        weights: manifest.weights,
        noise_magnitude: manifest.noise_magnitude,
        ridge: manifest.ridge,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GramManifest {
    method: Method,
    orders: Vec<u32>,
    epsilon_div: f64,
    threshold: f64,
    expected_layer_deviation: Vec<f64>,
    layers: Vec<String>,
    layer_channels: Vec<usize>,
    num_classes: usize,
    empty_classes: Vec<usize>,
}

fn bounds_files(c: usize, l: usize, p: u32) -> (String, String) {
    (
        format!("mins_c{c}_l{l}_p{p}.npy"),
        format!("maxs_c{c}_l{l}_p{p}.npy"),
    )
}

fn save_gram(g: &GramProfile, dir: &Path) -> Result<()> {
    for c in 0..g.num_classes {
        for l in 0..g.num_layers() {
            for (pi, &p) in g.orders.iter().enumerate() {
                let b = g.bounds(c, l, pi);
                let (lo, hi) = bounds_files(c, l, p);
                write_tensor(
                    &dir.join(lo),
                    &TensorBuffer::from_f64(vec![b.mins.len()], b.mins.clone())?,
                )?;
                write_tensor(
                    &dir.join(hi),
                    &TensorBuffer::from_f64(vec![b.maxs.len()], b.maxs.clone())?,
                )?;
            }
        }
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &GramManifest {
            method: Method::Gram,
            orders: g.orders.clone(),
            epsilon_div: g.epsilon_div,
            threshold: g.threshold,
            expected_layer_deviation: g.expected_layer_deviation.clone(),
            layers: g.layer_names.clone(),
            layer_channels: g.layer_channels.clone(),
            num_classes: g.num_classes,
            empty_classes: g.empty_classes.clone(),
        },
    )
}

fn load_gram(m: GramManifest, dir: &Path) -> Result<GramProfile> {
    if m.layer_channels.len() != m.layers.len()
        || m.expected_layer_deviation.len() != m.layers.len()
    {
        return Err(Error::InvalidModel(
            "gram manifest layer lists disagree".into(),
        ));
    }
    let mut bounds = Vec::new();
    for c in 0..m.num_classes {
        for (l, &ch) in m.layer_channels.iter().enumerate() {
            for &p in &m.orders {
                let (lo, hi) = bounds_files(c, l, p);
                let mins = read_tensor(&dir.join(lo))?.to_f64_vec();
                let maxs = read_tensor(&dir.join(hi))?.to_f64_vec();
                if mins.len() != upper_len(ch) || maxs.len() != upper_len(ch) {
                    return Err(Error::InvalidModel(format!(
                        "bounds for class {c} layer {l} order {p} have wrong length"
                    )));
                }
                bounds.push(Bounds { mins, maxs });
            }
        }
    }
    Ok(GramProfile {
        orders: m.orders,
        layer_names: m.layers,
        layer_channels: m.layer_channels,
        num_classes: m.num_classes,
        bounds,
        expected_layer_deviation: m.expected_layer_deviation,
        threshold: m.threshold,
        epsilon_div: m.epsilon_div,
        empty_classes: m.empty_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Layer;
    use crate::pipeline::{fit_detector, FitOptions};
    use crate::tensor::TensorBuffer;

    /// Two classes of 2-D features, 60 samples, logits pointing at the label.
    fn archive() -> ActivationArchive {
        let n = 60;
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let jitter = (i as f64 * 0.37).sin();
            feats.extend([c as f64 * 5.0 + jitter, (i as f64 * 0.91).cos()]);
            logits.extend(if c == 0 {
                [2.0 + jitter, 0.0]
            } else {
                [0.0, 2.0 - jitter]
            });
            labels.push(c as i64);
        }
        ActivationArchive::new(
            vec![Layer {
                name: "f".into(),
                tensor: TensorBuffer::from_f64(vec![n, 2], feats).unwrap(),
            }],
            TensorBuffer::from_f64(vec![n, 2], logits).unwrap(),
            Some(TensorBuffer::from_i64(vec![n], labels).unwrap()),
            None,
        )
        .unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Mahalanobis, Method::Gram, Method::Energy] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(m.to_string(), m.as_str());
        }
        assert!(matches!(
            "knn".parse::<Method>(),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn save_load_preserves_every_method() {
        let data = archive();
        let dir = tempfile::tempdir().unwrap();
        for m in [Method::Mahalanobis, Method::Gram, Method::Energy] {
            let fitted = fit_detector(&data, None, &FitOptions::new(m)).unwrap();
            let path = dir.path().join(m.as_str());
            fitted.save(&path).unwrap();
            assert_eq!(FittedDetector::load(&path).unwrap(), fitted);
        }
    }

    #[test]
    fn mahalanobis_flags_below_calibration_tau() {
        let fitted = fit_detector(&archive(), None, &FitOptions::new(Method::Mahalanobis)).unwrap();
        let tau = fitted.calibration.tau;
        assert!(!fitted.is_ood(tau));
        assert!(fitted.is_ood(tau - 1e-9));
    }

    #[test]
    fn native_thresholds_are_used_for_gram_and_energy() {
        let e = Detector::Energy(EnergyConfig {
            temperature: 1.0,
            threshold: -3.0,
        });
        // canonical score is the negated energy
        assert_eq!(e.native_is_ood(3.0), Some(false));
        assert_eq!(e.native_is_ood(2.5), Some(true));
    }

    #[test]
    fn load_rejects_bad_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            FittedDetector::load(dir.path()),
            Err(Error::Io { .. })
        ));
        fs::write(dir.path().join(MANIFEST_FILE), r#"{"method": "knn"}"#).unwrap();
        assert!(FittedDetector::load(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST_FILE), r#"{"threshold": 1}"#).unwrap();
        assert!(matches!(
            FittedDetector::load(dir.path()),
            Err(Error::InvalidModel(_))
        ));
    }
}
