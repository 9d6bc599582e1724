use std::path::Path;
use std::process::{Command, Output};

use gradfeat::data_io::{save_idx_images, save_idx_labels, ImageSet, LabelSet};
use gradfeat::harness::read_report_json;

/// 28x28 images whose label is the row band holding a bright bar.
fn write_toy(dir: &Path, prefix: &str, n: usize, offset: usize) {
    let mut pixels = vec![0.0f32; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i + offset) % 4;
        let row = label * 7 + 1 + (i / 4) % 5;
        for col in 4..24 {
            pixels[i * 784 + row * 28 + col] = 1.0;
        }
        labels.push(label as u8);
    }
    save_idx_images(
        &ImageSet::new(28, 28, pixels).unwrap(),
        dir.join(format!("{prefix}-images-idx3-ubyte")),
    )
    .unwrap();
    save_idx_labels(
        &LabelSet::new(labels),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
    .unwrap();
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path(), "train", 160, 0);
    write_toy(dir.path(), "t10k", 40, 1);
    dir
}

fn gradfeat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradfeat"))
        .args(args)
        .env("GRADFEAT_MNIST_DIR", dir)
        .env("GRADFEAT_THREADS", "1")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gradfeat(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for cmd in [
        "train-base",
        "train-rbm",
        "probe-rbm",
        "train-gradnet",
        "eval-gradnet",
        "kernel-gram",
        "extract-features",
        "run-pipeline",
        "emit-report",
    ] {
        assert!(help.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn base_gradnet_kernel_and_features_round_trip() {
    let dir = toy_dir();
    let d = dir.path();
    let out = ok(
        d,
        &[
            "train-base",
            "--layers",
            "784,8,4",
            "--lr",
            "0.5",
            "--epochs",
            "5",
            "--checkpoints",
            "0.5",
            "--evals-per-epoch",
            "2",
            "--out-dir",
            "base",
        ],
    );
    assert!(out.contains("snapshot 0.5"), "{out}");
    assert!(d.join("base/final.grdn").exists());
    let curve = std::fs::read_to_string(d.join("base/base_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 10);

    ok(
        d,
        &[
            "train-gradnet",
            "--base-ckpt",
            "base/final.grdn",
            "--blocks",
            "4,4",
            "--percentile",
            "85",
            "--norm",
            "scale,power:0.5",
            "--optimizer",
            "sgd",
            "--lr",
            "0.05",
            "--epochs",
            "2",
            "--monitor",
            "10",
            "--out",
            "net.grdn",
            "--metrics",
            "metrics.csv",
        ],
    );
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("epoch,train_loss,test_accuracy")
    );
    assert_eq!(metrics.lines().count(), 3);

    let eval = ok(
        d,
        &[
            "eval-gradnet",
            "--base-ckpt",
            "base/final.grdn",
            "--gradnet-ckpt",
            "net.grdn",
        ],
    );
    let mut lines = eval.lines();
    assert_eq!(lines.next(), Some("base_accuracy,gradnet_accuracy,gain"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 3);
    assert!(row[2].ends_with('%'));

    ok(
        d,
        &[
            "kernel-gram",
            "--snapshot",
            "base/final.grdn",
            "--samples",
            "12",
            "--mode",
            "diag",
            "--out",
            "gram.csv",
        ],
    );
    let gram = std::fs::read_to_string(d.join("gram.csv")).unwrap();
    assert_eq!(gram.lines().count(), 12);
    assert!(gram.lines().all(|l| l.split(',').count() == 12));

    let msg = ok(
        d,
        &[
            "extract-features",
            "--base-ckpt",
            "base/final.grdn",
            "--norm-chain",
            "scale,power:0.5",
            "--candidates",
            "all",
            "--limit",
            "5",
            "--out",
            "feats.bin",
        ],
    );
    assert!(msg.starts_with("20 records"), "{msg}");
}

#[test]
fn rbm_train_and_probe() {
    let dir = toy_dir();
    let d = dir.path();
    ok(
        d,
        &[
            "train-rbm",
            "--hidden",
            "4",
            "--epochs",
            "2",
            "--lr",
            "0.1",
            "--out",
            "rbm.grdn",
        ],
    );
    for kind in ["hidden", "gradient"] {
        let out = ok(
            d,
            &[
                "probe-rbm",
                "--rbm",
                "rbm.grdn",
                "--features",
                kind,
                "--epochs",
                "2",
            ],
        );
        let acc: f64 = out
            .trim()
            .strip_prefix("probe accuracy ")
            .unwrap()
            .parse()
            .unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn pipeline_and_report_conversion() {
    let dir = toy_dir();
    let d = dir.path();
    std::fs::write(
        d.join("exp.toml"),
        r#"
seed = 3

[data]
train_images = "train-images-idx3-ubyte"
train_labels = "train-labels-idx1-ubyte"
test_images = "t10k-images-idx3-ubyte"
test_labels = "t10k-labels-idx1-ubyte"

[base]
layer_sizes = [784, 8, 4]
learning_rate = 0.1
epochs = 2

[checkpoints]
thresholds = []

[gradnet]
sublayers = [4, 4]
epochs = 1
"#,
    )
    .unwrap();
    let csv = ok(
        d,
        &["run-pipeline", "--config", "exp.toml", "--out-dir", "run"],
    );
    assert!(csv.starts_with("threshold,base_epoch,base_accuracy,gradnet_accuracy,gain"));
    let json = std::fs::read_to_string(d.join("run/report.json")).unwrap();
    let report = read_report_json(&json).unwrap();
    assert_eq!(report.seed, 3);
    assert_eq!(report.rows.len(), 1);

    ok(
        d,
        &[
            "emit-report",
            "--input",
            "run/report.json",
            "--out",
            "again.csv",
        ],
    );
    assert_eq!(std::fs::read_to_string(d.join("again.csv")).unwrap(), csv);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = toy_dir();
    let d = dir.path();
    let out = gradfeat(
        d,
        &[
            "train-gradnet",
            "--base-ckpt",
            "missing.grdn",
            "--out",
            "x.grdn",
        ],
    );
    assert!(!out.status.success());
    let out = gradfeat(
        d,
        &[
            "kernel-gram",
            "--snapshot",
            "missing.grdn",
            "--mode",
            "sideways",
            "--out",
            "g.csv",
        ],
    );
    assert!(!out.status.success());
    let out = gradfeat(
        d,
        &["emit-report", "--input", "nope.json", "--out", "r.csv"],
    );
    assert!(!out.status.success());
}
