//! Archives written by hand on disk, the way an external exporter would.

use std::fs;
use std::path::Path;

use oodguard::gram::{fit_profile, gram_matrix, upper_len, GramConfig};
use oodguard::pipeline::{fit_detector, FitOptions};
use oodguard::{
    energy, load_archive, spatial_mean, write_npy, Error, FittedDetector, MahalanobisModel, Method,
    Ridge, TensorBuffer,
};

fn put(dir: &Path, name: &str, t: &TensorBuffer) {
    fs::write(dir.join(name), write_npy(t)).unwrap();
}

fn manifest(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("manifest.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn small_labelled_archive_from_files() {
    let dir = tempfile::tempdir().unwrap();
    put(
        dir.path(),
        "f.npy",
        &TensorBuffer::from_f64(vec![4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap(),
    );
    put(
        dir.path(),
        "logits.npy",
        &TensorBuffer::from_f64(vec![4, 3], vec![0.0; 12]).unwrap(),
    );
    put(
        dir.path(),
        "labels.npy",
        &TensorBuffer::from_i64(vec![4], vec![0, 1, 2, 1]).unwrap(),
    );
    let m = manifest(
        dir.path(),
        r#"{"layers": [{"name": "fc", "file": "f.npy", "role": "activation"}],
            "logits": {"file": "logits.npy"}, "labels": {"file": "labels.npy"}}"#,
    );
    let a = load_archive(&m).unwrap();
    assert_eq!((a.len(), a.num_classes()), (4, 3));
    assert_eq!(a.label_indices().unwrap(), vec![0, 1, 2, 1]);
    assert_eq!(a.layer_names(), vec!["fc".to_string()]);
}

/// Forty conv samples `[N, C=3, H=2, W=2]` in f32 plus a dense layer.
fn conv_archive(dir: &Path) -> std::path::PathBuf {
    let n = 40;
    let mut conv = Vec::new();
    let mut dense = Vec::new();
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        for ch in 0..3 {
            for px in 0..4 {
                let v = (c * 3 + ch) as f32 + ((i * 7 + ch * 3 + px) as f32 * 0.61).sin() * 0.3;
                conv.push(v);
            }
        }
        dense.extend([
            c as f32 * 4.0 + (i as f32 * 0.3).cos(),
            (i as f32 * 1.7).sin(),
        ]);
        logits.extend(if c == 0 { [3.0f32, 0.0] } else { [0.0, 3.0] });
        labels.push(c as i64);
    }
    put(
        dir,
        "conv.npy",
        &TensorBuffer::from_f32(vec![n, 3, 2, 2], conv).unwrap(),
    );
    put(
        dir,
        "dense.npy",
        &TensorBuffer::from_f32(vec![n, 2], dense).unwrap(),
    );
    put(
        dir,
        "logits.npy",
        &TensorBuffer::from_f32(vec![n, 2], logits).unwrap(),
    );
    put(
        dir,
        "labels.npy",
        &TensorBuffer::from_i64(vec![n], labels).unwrap(),
    );
    manifest(
        dir,
        r#"{"layers": [{"name": "block1", "file": "conv.npy", "role": "activation"},
                       {"name": "fc", "file": "dense.npy"}],
            "logits": {"file": "logits.npy"}, "labels": {"file": "labels.npy"}}"#,
    )
}

#[test]
fn conv_layers_feed_every_detector() {
    let dir = tempfile::tempdir().unwrap();
    let a = load_archive(conv_archive(dir.path())).unwrap();
    let conv = &a.layers()[0].tensor;
    assert_eq!(conv.shape(), &[40, 3, 2, 2]);

    // Mahalanobis sees the per-channel spatial mean
    let pooled = spatial_mean(conv).unwrap();
    let raw = conv.to_f64_vec();
    assert_eq!((pooled.rows(), pooled.cols()), (40, 3));
    let manual = raw[4..8].iter().sum::<f64>() / 4.0;
    assert!((pooled.get(0, 1) - manual).abs() < 1e-12);
    let maha = MahalanobisModel::fit(&a, Ridge::default()).unwrap();
    assert_eq!(maha.layers[0].dim(), 3);

    // Gram keeps the spatial axis: C = 3 channels over S = 4 positions
    let profile = fit_profile(&a, &GramConfig::default()).unwrap();
    assert_eq!(profile.layer_channels, vec![3, 2]);
    assert_eq!(profile.bounds(0, 0, 0).mins.len(), upper_len(3));
    let g = gram_matrix(&raw[..12], 3, 4, 1);
    assert!((g[0] - raw[..4].iter().map(|v| v * v).sum::<f64>()).abs() < 1e-12);

    for m in [Method::Mahalanobis, Method::Gram, Method::Energy] {
        let fitted = fit_detector(&a, None, &FitOptions::new(m)).unwrap();
        let save = dir.path().join(format!("model_{m}"));
        fitted.save(&save).unwrap();
        let loaded = FittedDetector::load(&save).unwrap();
        assert_eq!(
            loaded.score_samples(&a).unwrap(),
            fitted.score_samples(&a).unwrap()
        );
    }
    let e = energy(&[3.0, 0.0], 1.0).unwrap();
    assert!((e + (3.0f64.exp() + 1.0).ln()).abs() < 1e-12);
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    put(
        d,
        "f.npy",
        &TensorBuffer::from_f64(vec![3, 2], vec![0.0; 6]).unwrap(),
    );
    put(
        d,
        "f4.npy",
        &TensorBuffer::from_f64(vec![4, 2], vec![0.0; 8]).unwrap(),
    );
    put(
        d,
        "logits.npy",
        &TensorBuffer::from_f64(vec![3, 2], vec![0.0; 6]).unwrap(),
    );
    put(
        d,
        "labels.npy",
        &TensorBuffer::from_i64(vec![3], vec![0, 1, 2]).unwrap(),
    );

    let m = manifest(
        d,
        r#"{"layers": [], "logits": {"file": "logits.npy"}, "extra": 1}"#,
    );
    assert!(matches!(load_archive(&m), Err(Error::Json { .. })));

    let m = manifest(d, r#"{"layers": [{"name": "a", "file": "f.npy"}]}"#);
    assert!(matches!(load_archive(&m), Err(Error::MissingLogits)));

    let m = manifest(
        d,
        r#"{"layers": [{"name": "a", "file": "f4.npy"}], "logits": {"file": "logits.npy"}}"#,
    );
    assert!(matches!(
        load_archive(&m),
        Err(Error::InconsistentSampleCount { .. })
    ));

    let m = manifest(
        d,
        r#"{"layers": [], "logits": {"file": "logits.npy"}, "labels": {"file": "labels.npy"}}"#,
    );
    assert!(matches!(
        load_archive(&m),
        Err(Error::LabelOutOfRange {
            index: 2,
            label: 2,
            ..
        })
    ));

    let m = manifest(
        d,
        r#"{"layers": [{"name": "a", "file": "f.npy", "role": "gradient"}], "logits": {"file": "logits.npy"}}"#,
    );
    assert!(load_archive(&m).is_err());

    fs::write(d.join("junk.npy"), b"not an npy file").unwrap();
    let m = manifest(d, r#"{"layers": [], "logits": {"file": "junk.npy"}}"#);
    assert!(matches!(load_archive(&m), Err(Error::Npy { .. })));

    let m = manifest(d, r#"{"layers": [], "logits": {"file": "missing.npy"}}"#);
    assert!(matches!(load_archive(&m), Err(Error::Io { .. })));
}
