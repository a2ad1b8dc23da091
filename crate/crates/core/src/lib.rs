//! Out-of-distribution detection for trained classifiers.
//!
//! Three detectors score exported activations: class-conditional Mahalanobis
//! distance ([`mahalanobis`]), higher-order Gram matrix bounds ([`gram`]) and
//! the energy of the logits ([`energy`]). Every detector emits scores where
//! higher means more in-distribution; [`calibration`] maps those onto a 0-100
//! confidence and [`metrics`] evaluates them against OOD data. [`micronet`] is a
//! small dense classifier used to generate activations end to end.

pub mod archive;
pub mod calibration;
pub mod detector;
pub mod energy;
pub mod error;
pub mod gram;
pub mod mahalanobis;
pub mod metrics;
pub mod micronet;
pub mod npy;
pub mod numeric;
pub mod pipeline;
pub mod tensor;

pub use archive::{
    load_archive, predicted_classes, save_archive, spatial_mean, ActivationArchive, Layer,
    PredictedClass,
};
pub use calibration::{fit_calibration, CalibrationMap};
pub use detector::{Detector, FittedDetector, Method, ScoredSample};
pub use energy::{energy, EnergyConfig};
pub use error::{Error, Result};
pub use gram::{GramConfig, GramProfile};
pub use mahalanobis::{LayerGaussians, LayerWeights, MahalanobisModel, Ridge};
pub use metrics::{
    auroc, detection_accuracy, evaluate, histogram_report, tnr_at_tpr95, EvalReport, ScoreSeries,
};
pub use micronet::{MicroNet, SyntheticTask};
pub use npy::{read_npy, write_npy, NpyError};
pub use tensor::{DType, Matrix, TensorBuffer, TensorData};
