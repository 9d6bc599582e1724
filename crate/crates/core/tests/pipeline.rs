use std::path::Path;

use gradfeat::data_io::{save_idx_images, save_idx_labels, ImageSet, LabelSet};
use gradfeat::harness::{read_report_json, report_json, run_pipeline, ExperimentConfig};
use gradfeat::Error;

/// 8x8 images, label = row of the single bright bar (mod 4).
fn write_toy(dir: &Path, prefix: &str, n: usize) {
    let mut pixels = vec![0.0f32; n * 64];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 4;
        let row = label * 2 + (i / 4) % 2;
        pixels[i * 64 + row * 8..i * 64 + row * 8 + 8].fill(1.0);
        labels.push(label as u8);
    }
    save_idx_images(
        &ImageSet::new(8, 8, pixels).unwrap(),
        dir.join(format!("{prefix}-images")),
    )
    .unwrap();
    save_idx_labels(&LabelSet::new(labels), dir.join(format!("{prefix}-labels"))).unwrap();
}

fn config(dir: &Path, body: &str) -> ExperimentConfig {
    write_toy(dir, "train", 64);
    write_toy(dir, "test", 16);
    let text = format!(
        r#"{body}
[data]
train_images = "train-images"
train_labels = "train-labels"
test_images = "test-images"
test_labels = "test-labels"
"#
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

fn config_without_rewrite(dir: &Path) -> ExperimentConfig {
    ExperimentConfig::load(dir.join("exp.toml")).unwrap()
}

#[test]
fn untrained_pipeline_reports_initial_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        r#"
[base]
layer_sizes = [64, 6, 4]
epochs = 0

[checkpoints]
thresholds = []

[gradnet]
sublayers = [3, 3]
epochs = 0
"#,
    );
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.threshold, None);
    assert!(row.curve.is_empty());
    assert!(report.base_curve.is_empty());
    // Accuracies on 16 test samples are multiples of 1/16.
    for acc in [row.base_accuracy, row.gradnet_accuracy] {
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!((acc * 16.0).fract(), 0.0);
    }
    let back = read_report_json(&report_json(&report)).unwrap();
    assert_eq!(back.rows.len(), 1);
    assert_eq!(back.seed, report.seed);
}

#[test]
fn trained_pipeline_snapshots_and_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        r#"
seed = 4

[base]
layer_sizes = [64, 6, 4]
learning_rate = 0.5
batch_size = 8
epochs = 20

[checkpoints]
thresholds = [0.5, 0.99999]
evals_per_epoch = 2

[gradnet]
sublayers = [3, 3]
learning_rate = 0.05
epochs = 2
monitor_limit = 8

[kernel]
samples = 10
mode = "full"
"#,
    );
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.base_curve.len(), 40);
    let reached: Vec<f64> = report.rows.iter().filter_map(|r| r.threshold).collect();
    assert_eq!(reached.len() + report.missing_thresholds.len(), 2);
    assert!(reached.contains(&0.5));
    for row in &report.rows {
        assert!(row.base_accuracy >= row.threshold.unwrap());
        assert_eq!(row.curve.len(), 2);
        let k = row.kernel.as_ref().unwrap();
        assert_eq!(k.samples, 10);
        assert!(k.min_eigenvalue >= -1e-9);
        assert!(k.mean_self_kernel >= 0.0);
    }
}

#[test]
fn stage_errors_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cfg.data.train_images = dir.path().join("absent");
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }), "{err:?}");
    assert!(err.to_string().contains("config"), "{err}");

    std::fs::write(dir.path().join("train-images"), b"not idx").unwrap();
    let cfg = config_without_rewrite(dir.path());
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("split"), "{err}");

    let mut cfg = config(dir.path(), "");
    cfg.base.layer_sizes = vec![10, 4, 4];
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("base"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = ExperimentConfig::from_toml(
        r#"
[data]
train_images = "a"
train_labels = "b"
test_images = "c"
test_labels = "d"

[gradnet]
learning_rat = 0.1
"#,
    )
    .unwrap_err();
    assert!(err.to_string().contains("learning_rat"), "{err}");
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.checkpoints.thresholds, vec![0.92, 0.96]);
    assert_eq!(cfg.gradnet.sublayers, vec![5, 100, 25]);
    assert_eq!(cfg.features.norm.to_string(), "scale,power:0.5");
    assert!(cfg.data.train_images.starts_with(path.parent().unwrap()));
    // Validation also requires the data files, which may be absent.
    if let Err(e) = cfg.validate() {
        assert!(e.to_string().contains("not found"), "{e}");
    }
    let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
}
