//! Activation archives: per-layer features, logits and optional labels for one
//! dataset split, stored as a JSON manifest next to NPY tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{read_npy, write_npy};
use crate::numeric::argmax;
use crate::tensor::{DType, Matrix, TensorBuffer, TensorData};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A named activation tensor with the sample axis first.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub tensor: TensorBuffer,
}

/// Class index predicted by the classifier for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PredictedClass(pub usize);

impl PredictedClass {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Immutable bundle of activations for one dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationArchive {
    layers: Vec<Layer>,
    logits: TensorBuffer,
    labels: Option<TensorBuffer>,
    raw_inputs: Option<TensorBuffer>,
}

fn check_rows(what: &str, t: &TensorBuffer, n: usize) -> Result<()> {
    if t.rows() != n {
        return Err(Error::InconsistentSampleCount {
            what: what.to_string(),
            expected: n,
            found: t.rows(),
        });
    }
    Ok(())
}

impl ActivationArchive {
    /// Builds an archive, validating sample counts, dtypes and label range.
    pub fn new(
        layers: Vec<Layer>,
        logits: TensorBuffer,
        labels: Option<TensorBuffer>,
        raw_inputs: Option<TensorBuffer>,
    ) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(Error::InvalidTensor(format!(
                "logits must be [N, K], got {:?}",
                logits.shape()
            )));
        }
        if !logits.dtype().is_float() {
            return Err(Error::InvalidTensor("logits must be float".into()));
        }
        let n = logits.rows();
        let k = logits.shape()[1];
        if k < 2 {
            return Err(Error::InvalidTensor(format!(
                "need at least 2 classes, logits have {k}"
            )));
        }
        for layer in &layers {
            if layer.tensor.shape().len() < 2 {
                return Err(Error::InvalidTensor(format!(
                    "layer {:?} must have rank >= 2, got {:?}",
                    layer.name,
                    layer.tensor.shape()
                )));
            }
            if !layer.tensor.dtype().is_float() {
                return Err(Error::InvalidTensor(format!(
                    "layer {:?} must be float",
                    layer.name
                )));
            }
            check_rows(&format!("layer {:?}", layer.name), &layer.tensor, n)?;
        }
        if let Some(labels) = &labels {
            if labels.shape().len() != 1 || labels.dtype() != DType::I64 {
                return Err(Error::InvalidTensor(format!(
                    "labels must be int64 [N], got {:?} {:?}",
                    labels.dtype(),
                    labels.shape()
                )));
            }
            check_rows("labels", labels, n)?;
            if let TensorData::I64(v) = labels.data() {
                if let Some((index, &label)) = v
                    .iter()
                    .enumerate()
                    .find(|(_, &l)| l < 0 || l as usize >= k)
                {
                    return Err(Error::LabelOutOfRange {
                        index,
                        label,
                        num_classes: k,
                    });
                }
            }
        }
        if let Some(inputs) = &raw_inputs {
            if inputs.shape().len() != 2 || !inputs.dtype().is_float() {
                return Err(Error::InvalidTensor(format!(
                    "inputs must be float [N, D], got {:?}",
                    inputs.shape()
                )));
            }
            check_rows("inputs", inputs, n)?;
        }
        Ok(Self {
            layers,
            logits,
            labels,
            raw_inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn logits(&self) -> &TensorBuffer {
        &self.logits
    }

    pub fn logits_matrix(&self) -> Matrix {
        Matrix::from_tensor(&self.logits).expect("validated rank-2 logits")
    }

    pub fn labels(&self) -> Option<&TensorBuffer> {
        self.labels.as_ref()
    }

    /// Labels as class indices, if present.
    pub fn label_indices(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|t| match t.data() {
            TensorData::I64(v) => v.iter().map(|&l| l as usize).collect(),
            _ => unreachable!("labels validated as int64"),
        })
    }

    pub fn raw_inputs(&self) -> Option<&TensorBuffer> {
        self.raw_inputs.as_ref()
    }

    /// Archive restricted to the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> ActivationArchive {
        ActivationArchive {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    tensor: l.tensor.select_rows(indices),
                })
                .collect(),
            logits: self.logits.select_rows(indices),
            labels: self.labels.as_ref().map(|t| t.select_rows(indices)),
            raw_inputs: self.raw_inputs.as_ref().map(|t| t.select_rows(indices)),
        }
    }
}

/// Per-sample argmax of the logits, lowest index winning ties.
pub fn predicted_classes(archive: &ActivationArchive) -> Vec<PredictedClass> {
    archive
        .logits_matrix()
        .iter_rows()
        .map(|row| PredictedClass(argmax(row)))
        .collect()
}

/// Averages `[N, C, ...spatial]` over the spatial axes, giving `[N, C]`.
///
/// Rank-2 input is returned unchanged (widened to `f64`).
pub fn spatial_mean(tensor: &TensorBuffer) -> Result<Matrix> {
    let shape = tensor.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidTensor(format!(
            "spatial_mean needs rank >= 2, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let values = tensor.to_f64_vec();
    if shape.len() == 2 {
        return Matrix::new(n, c, values);
    }
    let mut out = Matrix::zeros(n, c);
    if spatial == 0 {
        return Ok(out);
    }
    for i in 0..n {
        let row = out.row_mut(i);
        for (ch, slot) in row.iter_mut().enumerate() {
            let start = (i * c + ch) * spatial;
            *slot = values[start..start + spatial].iter().sum::<f64>() / spatial as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub file: String,
    #[serde(default = "activation_role")]
    pub role: String,
}

fn activation_role() -> String {
    "activation".to_string()
}

/// JSON manifest describing an archive on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub logits: Option<FileRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<FileRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<FileRef>,
}

pub(crate) fn read_tensor(path: &Path) -> Result<TensorBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_npy(&bytes).map_err(|e| Error::npy(path.display().to_string(), e))
}

pub(crate) fn write_tensor(path: &Path, tensor: &TensorBuffer) -> Result<()> {
    fs::write(path, write_npy(tensor)).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads an archive from its manifest. Tensor paths are relative to the manifest.
pub fn load_archive(manifest_path: impl AsRef<Path>) -> Result<ActivationArchive> {
    let manifest_path = manifest_path.as_ref();
    let manifest: ArchiveManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |f: &str| -> PathBuf { base.join(f) };

    let logits_ref = manifest.logits.as_ref().ok_or(Error::MissingLogits)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if entry.role != "activation" {
            return Err(Error::InvalidTensor(format!(
                "layer {:?} has unsupported role {:?}",
                entry.name, entry.role
            )));
        }
        layers.push(Layer {
            name: entry.name.clone(),
            tensor: read_tensor(&resolve(&entry.file))?,
        });
    }
    let logits = read_tensor(&resolve(&logits_ref.file))?;
    let labels = manifest
        .labels
        .as_ref()
        .map(|r| read_tensor(&resolve(&r.file)))
        .transpose()?;
    let inputs = manifest
        .inputs
        .as_ref()
        .map(|r| read_tensor(&resolve(&r.file)))
        .transpose()?;
    ActivationArchive::new(layers, logits, labels, inputs)
}

/// Writes `archive` into `dir` (created if needed) and returns the manifest path.
pub fn save_archive(archive: &ActivationArchive, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, layer) in archive.layers.iter().enumerate() {
        let file = format!("layer_{i}.npy");
        write_tensor(&dir.join(&file), &layer.tensor)?;
        entries.push(LayerEntry {
            name: layer.name.clone(),
            file,
            role: activation_role(),
        });
    }
    write_tensor(&dir.join("logits.npy"), &archive.logits)?;
    let labels = match &archive.labels {
        Some(t) => {
            write_tensor(&dir.join("labels.npy"), t)?;
            Some(FileRef {
                file: "labels.npy".into(),
            })
        }
        None => None,
    };
    let inputs = match &archive.raw_inputs {
        Some(t) => {
            write_tensor(&dir.join("inputs.npy"), t)?;
            Some(FileRef {
                file: "inputs.npy".into(),
            })
        }
        None => None,
    };
    let manifest = ArchiveManifest {
        layers: entries,
        logits: Some(FileRef {
            file: "logits.npy".into(),
        }),
        labels,
        inputs,
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}
