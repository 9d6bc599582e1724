//! Experiment configuration, the end-to-end pipeline, and report emission.
//!
//! A run splits the training set, trains the base network while capturing
//! snapshots at accuracy thresholds, trains and evaluates one GradNet per
//! snapshot, and records the relative gain of each GradNet over its base.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::base_model::{evaluate, mlp_init, train_base, CheckpointPlan, EvalPoint, SgdConfig};
use crate::data_io::{split_dataset, Augmentation, Dataset, SplitMode, SplitSpec};
use crate::error::{Error, Result, StageExt};
use crate::features::{extract_gradient, FeatureConfig, NormalizationSpec};
use crate::gradnet::{
    gradnet_evaluate, gradnet_init, train_gradnet, BlockSpec, EpochMetrics, TrainConfig,
};
use crate::metric::{gram_matrix, metric_accumulate, psd_check, MetricMode};
use crate::optim::OptimizerKind;
use crate::seed;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "GRADFEAT_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Use only the first `n` test samples.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fraction: f64,
    pub mode: SplitMode,
    /// Use only the first `n` samples of each half.
    pub limit: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fraction: 0.5,
            mode: SplitMode::Contiguous,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub layer_sizes: Vec<usize>,
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            layer_sizes: vec![784, 300, 100, 10],
            optimizer: "sgd".into(),
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    pub thresholds: Vec<f64>,
    pub evals_per_epoch: usize,
    pub stop_when_complete: bool,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig {
            thresholds: vec![0.92, 0.96],
            evals_per_epoch: 1,
            stop_when_complete: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub percentile: f64,
    pub norm: NormalizationSpec,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            percentile: 85.0,
            norm: NormalizationSpec::scale_sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradNetConfig {
    pub sublayers: Vec<usize>,
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augmentation: Augmentation,
    /// Test samples used for the per-epoch accuracy; 0 disables the curve.
    pub monitor_limit: usize,
}

impl Default for GradNetConfig {
    fn default() -> Self {
        GradNetConfig {
            sublayers: vec![5, 100, 25],
            optimizer: "sgd".into(),
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 15,
            augmentation: Augmentation::None,
            monitor_limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Gradients of the first `samples` items of the second half, at their true labels.
    pub samples: usize,
    pub mode: String,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            samples: 200,
            mode: "diag".into(),
        }
    }
}

/// Everything a pipeline run depends on. Loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub checkpoints: CheckpointConfig,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub gradnet: GradNetConfig,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.data.train_images,
                &mut cfg.data.train_labels,
                &mut cfg.data.test_images,
                &mut cfg.data.test_labels,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Checks values and that every data file exists.
    pub fn validate(&self) -> Result<()> {
        for p in [
            &self.data.train_images,
            &self.data.train_labels,
            &self.data.test_images,
            &self.data.test_labels,
        ] {
            if !p.is_file() {
                return Err(Error::validation(format!(
                    "data file {} not found",
                    p.display()
                )));
            }
        }
        if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
            return Err(Error::validation("split fraction must lie in (0, 1)"));
        }
        self.base_sgd()?.validate()?;
        self.checkpoint_plan()
            .thresholds
            .iter()
            .try_for_each(|&t| {
                if t > 0.0 && t < 1.0 {
                    Ok(())
                } else {
                    Err(Error::validation(
                        "checkpoint accuracies must lie in (0, 1)",
                    ))
                }
            })?;
        self.gradnet_train()?.validate()?;
        let n_blocks = self.base.layer_sizes.len().saturating_sub(1);
        BlockSpec::adjacent(&self.gradnet.sublayers, n_blocks)?;
        if let Some(k) = &self.kernel {
            MetricMode::parse(&k.mode)?;
            if k.samples == 0 {
                return Err(Error::validation("kernel needs at least one sample"));
            }
        }
        Ok(())
    }

    fn base_sgd(&self) -> Result<SgdConfig> {
        Ok(SgdConfig {
            learning_rate: self.base.learning_rate,
            batch_size: self.base.batch_size,
            epochs: self.base.epochs,
            seed: self.seed,
            optimizer: OptimizerKind::parse(&self.base.optimizer)?,
        })
    }

    fn checkpoint_plan(&self) -> CheckpointPlan {
        CheckpointPlan {
            thresholds: self.checkpoints.thresholds.clone(),
            evals_per_epoch: self.checkpoints.evals_per_epoch,
            stop_when_complete: self.checkpoints.stop_when_complete,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            percentile: self.features.percentile,
            norm: self.features.norm.clone(),
            label_masks: None,
        }
    }

    fn gradnet_train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.gradnet.epochs,
            batch_size: self.gradnet.batch_size,
            optimizer: OptimizerKind::parse(&self.gradnet.optimizer)?,
            learning_rate: self.gradnet.learning_rate,
            features: self.feature_config(),
            augmentation: self.gradnet.augmentation,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub samples: usize,
    pub mode: String,
    pub min_eigenvalue: f64,
    pub mean_self_kernel: f64,
}

/// One base snapshot and the GradNet trained on top of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    /// `None` when the final base model is used because no thresholds were set.
    pub threshold: Option<f64>,
    pub base_epoch: f64,
    pub base_accuracy: f64,
    pub gradnet_accuracy: f64,
    pub gain: f64,
    pub curve: Vec<EpochMetrics>,
    pub kernel: Option<KernelSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub rows: Vec<SnapshotRow>,
    /// Thresholds the base model never reached.
    pub missing_thresholds: Vec<f64>,
    pub base_curve: Vec<EvalPoint>,
    /// Wall-clock seconds per stage. Not part of emitted reports.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

/// `(g - b) / b`.
pub fn relative_gain(base: f64, gradnet: f64) -> f64 {
    (gradnet - base) / base
}

/// Relative gain as a signed percentage with one decimal, e.g. `+6.5%`.
pub fn format_gain(base: f64, gradnet: f64) -> String {
    let pct = relative_gain(base, gradnet) * 100.0;
    if !pct.is_finite() {
        return "n/a".into();
    }
    let rounded = (pct * 10.0).round() / 10.0;
    if rounded == 0.0 {
        return "+0.0%".into();
    }
    format!("{rounded:+.1}%")
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let train = Dataset::load(&cfg.data.train_images, &cfg.data.train_labels)?;
    let mut test = Dataset::load(&cfg.data.test_images, &cfg.data.test_labels)?;
    if let Some(n) = cfg.data.test_limit {
        test = test.head(n);
    }
    let spec = SplitSpec {
        fraction: cfg.split.fraction,
        seed: cfg.seed,
        mode: cfg.split.mode,
    };
    let (mut a, mut b) = split_dataset(&train.images, &train.labels, &spec)?;
    if let Some(n) = cfg.split.limit {
        a = a.head(n);
        b = b.head(n);
    }
    Ok((a, b, test))
}

fn kernel_summary(
    base: &crate::base_model::BaseModel,
    data: &Dataset,
    k: &KernelConfig,
) -> Result<KernelSummary> {
    let mode = MetricMode::parse(&k.mode)?;
    let m = k.samples.min(data.len());
    let grads = (0..m)
        .map(|i| {
            extract_gradient(base, data.images.image(i), data.labels.get(i)).map(|g| g.flatten())
        })
        .collect::<Result<Vec<_>>>()?;
    let metric = metric_accumulate(&grads, None, mode)?;
    let gram = gram_matrix(&grads, &metric)?;
    Ok(KernelSummary {
        samples: m,
        mode: k.mode.clone(),
        min_eigenvalue: psd_check(&gram)?,
        mean_self_kernel: gram.diagonal().mean(),
    })
}

/// Runs split, base training with snapshots, then GradNet training and
/// evaluation for every snapshot. Errors name the failing stage.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate().stage("config")?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let (half_a, half_b, test) = load_data(cfg).stage("split")?;
    lap("split", &mut timings);

    let base_init = mlp_init(
        &cfg.base.layer_sizes,
        seed::derive_seed(cfg.seed, seed::stream::BASE_INIT),
    )
    .stage("base")?;
    let plan = cfg.checkpoint_plan();
    let trained = train_base(
        base_init,
        &half_a,
        &test,
        &cfg.base_sgd().stage("base")?,
        &plan,
    )
    .stage("base")?;
    lap("base", &mut timings);

    let mut snapshots: Vec<(Option<f64>, f64, f64, crate::base_model::BaseModel)> = trained
        .snapshots
        .iter()
        .map(|s| (Some(s.threshold), s.epoch, s.accuracy, s.model.clone()))
        .collect();
    if plan.thresholds.is_empty() {
        let acc = evaluate(&trained.model, &test.images, &test.labels).stage("base")?;
        snapshots.push((None, cfg.base.epochs as f64, acc, trained.model.clone()));
    }

    let train_cfg = cfg.gradnet_train().stage("gradnet")?;
    let monitor = (cfg.gradnet.monitor_limit > 0).then(|| test.head(cfg.gradnet.monitor_limit));
    let mut rows = Vec::with_capacity(snapshots.len());
    for (threshold, epoch, base_acc, model) in snapshots {
        let spec = BlockSpec::adjacent(&cfg.gradnet.sublayers, model.block_lengths().len())
            .stage("gradnet")?;
        let net = gradnet_init(
            &spec,
            &model.block_lengths(),
            model.n_classes(),
            seed::derive_seed(cfg.seed, seed::stream::GRADNET_INIT),
        )
        .stage("gradnet")?;
        let (net, curve) =
            train_gradnet(&model, &half_b, net, &train_cfg, monitor.as_ref()).stage("gradnet")?;
        lap("gradnet", &mut timings);
        let acc = gradnet_evaluate(
            &model,
            &net,
            &test.images,
            &test.labels,
            &train_cfg.features,
        )
        .stage("evaluate")?;
        lap("evaluate", &mut timings);
        let kernel = match &cfg.kernel {
            Some(k) => Some(kernel_summary(&model, &half_b, k).stage("kernel")?),
            None => None,
        };
        lap("kernel", &mut timings);
        rows.push(SnapshotRow {
            threshold,
            base_epoch: epoch,
            base_accuracy: base_acc,
            gradnet_accuracy: acc,
            gain: relative_gain(base_acc, acc),
            curve,
            kernel,
        });
    }
    Ok(RunReport {
        seed: cfg.seed,
        rows,
        missing_thresholds: trained.missing,
        base_curve: trained.curve,
        timings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::validation(format!(
                "unknown report format `{other}`"
            ))),
        }
    }

    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(path.extension().and_then(|e| e.to_str()).unwrap_or(""))
    }
}

fn acc4(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        String::new()
    }
}

/// Summary table: one line per snapshot.
pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from("threshold,base_epoch,base_accuracy,gradnet_accuracy,gain\n");
    for r in &report.rows {
        let t = r.threshold.map(|t| format!("{t}")).unwrap_or_default();
        writeln!(
            out,
            "{t},{:.4},{},{},{}",
            r.base_epoch,
            acc4(r.base_accuracy),
            acc4(r.gradnet_accuracy),
            format_gain(r.base_accuracy, r.gradnet_accuracy)
        )
        .unwrap();
    }
    out
}

/// Full report including learning curves. Accuracies carry four decimals.
pub fn report_json(report: &RunReport) -> String {
    use serde_json::{json, Value};
    let num = |x: f64| -> Value {
        if x.is_finite() {
            json!((x * 1e4).round() / 1e4)
        } else {
            Value::Null
        }
    };
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "threshold": r.threshold,
                "base_epoch": r.base_epoch,
                "base_accuracy": num(r.base_accuracy),
                "gradnet_accuracy": num(r.gradnet_accuracy),
                "gain": format_gain(r.base_accuracy, r.gradnet_accuracy),
                "curve": r.curve.iter().map(|m| json!({
                    "epoch": m.epoch,
                    "train_loss": m.train_loss,
                    "test_accuracy": num(m.test_accuracy),
                })).collect::<Vec<_>>(),
                "kernel": r.kernel,
            })
        })
        .collect();
    let value = json!({
        "seed": report.seed,
        "rows": rows,
        "missing_thresholds": report.missing_thresholds,
        "base_curve": report.base_curve.iter().map(|p| json!({
            "epoch": p.epoch,
            "train_loss": p.train_loss,
            "test_accuracy": num(p.test_accuracy),
        })).collect::<Vec<_>>(),
    });
    let mut s = serde_json::to_string_pretty(&value).expect("report serializes");
    s.push('\n');
    s
}

pub fn emit_report(report: &RunReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(report),
        ReportFormat::Csv => report_csv(report),
    };
    fs::write(path, text)?;
    Ok(())
}

/// Per-epoch GradNet metrics as `epoch,train_loss,test_accuracy`.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,test_accuracy\n");
    for m in metrics {
        writeln!(
            out,
            "{},{:.6},{}",
            m.epoch,
            m.train_loss,
            acc4(m.test_accuracy)
        )
        .unwrap();
    }
    out
}

/// Base learning curve as `epoch,train_loss,test_accuracy`.
pub fn base_curve_csv(curve: &[EvalPoint]) -> String {
    let mut out = String::from("epoch,train_loss,test_accuracy\n");
    for p in curve {
        writeln!(
            out,
            "{:.4},{:.6},{}",
            p.epoch,
            p.train_loss,
            acc4(p.test_accuracy)
        )
        .unwrap();
    }
    out
}

/// Writes `report.json`, `report.csv` and plot-ready curve files into `dir`.
pub fn emit_all(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    emit_report(report, dir.join("report.json"), ReportFormat::Json)?;
    emit_report(report, dir.join("report.csv"), ReportFormat::Csv)?;
    fs::write(
        dir.join("base_curve.csv"),
        base_curve_csv(&report.base_curve),
    )?;
    for (k, r) in report.rows.iter().enumerate() {
        fs::write(
            dir.join(format!("gradnet_curve_{k}.csv")),
            metrics_csv(&r.curve),
        )?;
    }
    Ok(())
}

/// Reads a JSON report written by [`emit_report`] back into a [`RunReport`].
pub fn read_report_json(text: &str) -> Result<RunReport> {
    use serde_json::Value;
    let v: Value = serde_json::from_str(text).map_err(|e| Error::format(format!("report: {e}")))?;
    let f = |x: &Value| x.as_f64().unwrap_or(f64::NAN);
    let bad = || Error::format("report is missing required fields");
    let rows = v["rows"]
        .as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|r| {
            let (b, g) = (f(&r["base_accuracy"]), f(&r["gradnet_accuracy"]));
            Ok(SnapshotRow {
                threshold: r["threshold"].as_f64(),
                base_epoch: f(&r["base_epoch"]),
                base_accuracy: b,
                gradnet_accuracy: g,
                gain: relative_gain(b, g),
                curve: r["curve"]
                    .as_array()
                    .ok_or_else(bad)?
                    .iter()
                    .map(|m| EpochMetrics {
                        epoch: m["epoch"].as_u64().unwrap_or(0) as usize,
                        train_loss: f(&m["train_loss"]),
                        test_accuracy: f(&m["test_accuracy"]),
                    })
                    .collect(),
                kernel: serde_json::from_value(r["kernel"].clone())
                    .map_err(|e| Error::format(e.to_string()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        seed: v["seed"].as_u64().ok_or_else(bad)?,
        rows,
        missing_thresholds: v["missing_thresholds"]
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(f)
            .collect(),
        base_curve: v["base_curve"]
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|p| EvalPoint {
                epoch: f(&p["epoch"]),
                train_loss: f(&p["train_loss"]),
                test_accuracy: f(&p["test_accuracy"]),
            })
            .collect(),
        timings: Vec::new(),
    })
}

/// Caps the global worker pool at `GRADFEAT_THREADS` when set.
/// Has no effect once the pool is running.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::validation(format!("{THREADS_ENV}={raw} is not a positive integer"))
    })?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(Some(n))
}
