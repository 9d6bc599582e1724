use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;

use gradfeat::base_model::{
    evaluate, load_checkpoint, mlp_init, save_checkpoint, train_base, CheckpointPlan, SgdConfig,
};
use gradfeat::data_io::{
    split_dataset, write_feature_records, Augmentation, Dataset, FeatureRecord, SplitMode,
    SplitSpec,
};
use gradfeat::features::{extract_gradient, FeatureConfig, NormalizationSpec};
use gradfeat::gradnet::{
    gradnet_evaluate, gradnet_init, load_gradnet, save_gradnet, train_gradnet, BlockSpec,
    TrainConfig,
};
use gradfeat::harness::{
    base_curve_csv, configure_threads, emit_all, emit_report, format_gain, metrics_csv,
    read_report_json, run_pipeline, ExperimentConfig, ReportFormat,
};
use gradfeat::metric::{gram_csv, gram_matrix, metric_accumulate, psd_check, MetricMode};
use gradfeat::optim::OptimizerKind;
use gradfeat::rbm::{
    evaluate_probe, load_rbm, rbm_features, reconstruction_error, save_rbm, train_linear_probe,
    train_rbm, ProbeFeatures, RbmTrainConfig,
};
use gradfeat::seed;

/// Gradient-feature classifiers on top of weakly trained networks.
#[derive(Parser)]
#[command(name = "gradfeat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base MLP on the first split and save threshold snapshots.
    TrainBase(TrainBaseArgs),
    /// Train a binary RBM with CD-1 on the first split.
    TrainRbm(TrainRbmArgs),
    /// Fit a linear probe on RBM features of the second split and report test accuracy.
    ProbeRbm(ProbeRbmArgs),
    /// Train a GradNet on gradient features of a base snapshot.
    TrainGradnet(TrainGradnetArgs),
    /// Test accuracy of a trained GradNet, next to its base model.
    EvalGradnet(EvalGradnetArgs),
    /// Tangent-kernel Gram matrix of per-sample gradients, as CSV.
    KernelGram(KernelGramArgs),
    /// Write sparse gradient feature records for a dataset.
    ExtractFeatures(ExtractFeaturesArgs),
    /// Run the full experiment described by a TOML config.
    RunPipeline(RunPipelineArgs),
    /// Convert a JSON run report to JSON or CSV.
    EmitReport(EmitReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Defaults to train-images-idx3-ubyte under $GRADFEAT_MNIST_DIR (or data/mnist).
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Contiguous)]
    split_mode: SplitArg,
    /// Use only the first N samples of each split.
    #[arg(long)]
    limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Contiguous,
    Shuffled,
}

fn mnist_file(explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let dir = std::env::var_os("GRADFEAT_MNIST_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| "data/mnist".into());
        dir.join(name)
    })
}

struct Data {
    half_a: Dataset,
    half_b: Dataset,
    test: Dataset,
}

impl DataArgs {
    fn test(&self) -> Result<Dataset> {
        let imgs = mnist_file(&self.test_images, "t10k-images-idx3-ubyte");
        let lbls = mnist_file(&self.test_labels, "t10k-labels-idx1-ubyte");
        let test =
            Dataset::load(&imgs, &lbls).with_context(|| format!("loading {}", imgs.display()))?;
        Ok(match self.test_limit {
            Some(n) => test.head(n),
            None => test,
        })
    }

    fn load(&self) -> Result<Data> {
        let imgs = mnist_file(&self.train_images, "train-images-idx3-ubyte");
        let lbls = mnist_file(&self.train_labels, "train-labels-idx1-ubyte");
        let train =
            Dataset::load(&imgs, &lbls).with_context(|| format!("loading {}", imgs.display()))?;
        let spec = SplitSpec {
            fraction: self.split_fraction,
            seed: self.seed,
            mode: match self.split_mode {
                SplitArg::Contiguous => SplitMode::Contiguous,
                SplitArg::Shuffled => SplitMode::Shuffled,
            },
        };
        let (mut half_a, mut half_b) = split_dataset(&train.images, &train.labels, &spec)?;
        if let Some(n) = self.limit {
            half_a = half_a.head(n);
            half_b = half_b.head(n);
        }
        Ok(Data {
            half_a,
            half_b,
            test: self.test()?,
        })
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("`{p}`: {e}"))
        })
        .collect()
}

#[derive(Args)]
struct TrainBaseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "784,300,100,10")]
    layers: String,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    /// Ascending test accuracies at which to snapshot.
    #[arg(long, default_value = "0.92,0.96")]
    checkpoints: String,
    #[arg(long, default_value_t = 1)]
    evals_per_epoch: usize,
    /// Stop once every checkpoint has been captured.
    #[arg(long)]
    stop_when_complete: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

fn train_base_cmd(a: TrainBaseArgs) -> Result<()> {
    let data = a.data.load()?;
    let layers: Vec<usize> = parse_list(&a.layers)?;
    let model = mlp_init(
        &layers,
        seed::derive_seed(a.data.seed, seed::stream::BASE_INIT),
    )?;
    let cfg = SgdConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.data.seed,
        optimizer: OptimizerKind::parse(&a.optimizer)?,
    };
    let plan = CheckpointPlan {
        thresholds: parse_list(&a.checkpoints)?,
        evals_per_epoch: a.evals_per_epoch,
        stop_when_complete: a.stop_when_complete,
    };
    let run = train_base(model, &data.half_a, &data.test, &cfg, &plan)?;
    fs::create_dir_all(&a.out_dir)?;
    for s in &run.snapshots {
        let path = a.out_dir.join(format!("snapshot_{}.grdn", s.threshold));
        save_checkpoint(&s.model, &path)?;
        println!(
            "snapshot {} accuracy {:.4} epoch {:.3} -> {}",
            s.threshold,
            s.accuracy,
            s.epoch,
            path.display()
        );
    }
    for t in &run.missing {
        println!("threshold {t} not reached");
    }
    save_checkpoint(&run.model, a.out_dir.join("final.grdn"))?;
    fs::write(a.out_dir.join("base_curve.csv"), base_curve_csv(&run.curve))?;
    Ok(())
}

#[derive(Args)]
struct TrainRbmArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn train_rbm_cmd(a: TrainRbmArgs) -> Result<()> {
    let data = a.data.load()?;
    let cfg = RbmTrainConfig {
        n_hidden: a.hidden,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.data.seed,
    };
    let rbm = train_rbm(&data.half_a.images, &cfg)?;
    save_rbm(&rbm, &a.out)?;
    println!(
        "reconstruction error {:.6}",
        reconstruction_error(&rbm, &data.test.images)?
    );
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeArg {
    Hidden,
    Gradient,
}

#[derive(Args)]
struct ProbeRbmArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    rbm: PathBuf,
    #[arg(long, value_enum, default_value_t = ProbeArg::Gradient)]
    features: ProbeArg,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

fn probe_rbm_cmd(a: ProbeRbmArgs) -> Result<()> {
    let data = a.data.load()?;
    let rbm = load_rbm(&a.rbm)?;
    let kind = match a.features {
        ProbeArg::Hidden => ProbeFeatures::Hidden,
        ProbeArg::Gradient => ProbeFeatures::Gradient,
    };
    let train_x = rbm_features(&rbm, &data.half_b.images, kind)?;
    let train_y: Vec<usize> = data
        .half_b
        .labels
        .as_slice()
        .iter()
        .map(|&l| l as usize)
        .collect();
    let cfg = SgdConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.data.seed,
        optimizer: OptimizerKind::parse(&a.optimizer)?,
    };
    let probe = train_linear_probe(&train_x, &train_y, 10, &cfg)?;
    let test_x = rbm_features(&rbm, &data.test.images, kind)?;
    let test_y: Vec<usize> = data
        .test
        .labels
        .as_slice()
        .iter()
        .map(|&l| l as usize)
        .collect();
    println!(
        "probe accuracy {:.4}",
        evaluate_probe(&probe, &test_x, &test_y)?
    );
    Ok(())
}

#[derive(Args)]
struct FeatureArgs {
    #[arg(long, default_value_t = 85.0)]
    percentile: f64,
    #[arg(long, alias = "norm-chain", default_value = "scale,power:0.5")]
    norm: String,
}

impl FeatureArgs {
    fn config(&self) -> Result<FeatureConfig> {
        let norm: NormalizationSpec = self.norm.parse()?;
        let cfg = FeatureConfig {
            percentile: self.percentile,
            norm,
            label_masks: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainGradnetArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long)]
    base_ckpt: PathBuf,
    #[arg(long, default_value = "5,100,25")]
    blocks: String,
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value = "none")]
    augment: String,
    /// Test samples used for the per-epoch accuracy (0 disables it).
    #[arg(long, default_value_t = 1000)]
    monitor: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn train_gradnet_cmd(a: TrainGradnetArgs) -> Result<()> {
    let data = a.data.load()?;
    let base = load_checkpoint(&a.base_ckpt)?;
    let spec = BlockSpec::adjacent(&parse_list::<usize>(&a.blocks)?, base.block_lengths().len())?;
    let net = gradnet_init(
        &spec,
        &base.block_lengths(),
        base.n_classes(),
        seed::derive_seed(a.data.seed, seed::stream::GRADNET_INIT),
    )?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: OptimizerKind::parse(&a.optimizer)?,
        learning_rate: a.lr,
        features: a.features.config()?,
        augmentation: Augmentation::parse(&a.augment)?,
        seed: a.data.seed,
    };
    let monitor = (a.monitor > 0).then(|| data.test.head(a.monitor));
    let (net, metrics) = train_gradnet(&base, &data.half_b, net, &cfg, monitor.as_ref())?;
    save_gradnet(&net, &cfg.features, &a.out)?;
    let csv = metrics_csv(&metrics);
    match &a.metrics {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args)]
struct EvalGradnetArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    base_ckpt: PathBuf,
    #[arg(long)]
    gradnet_ckpt: PathBuf,
}

fn eval_gradnet_cmd(a: EvalGradnetArgs) -> Result<()> {
    let test = a.data.test()?;
    let base = load_checkpoint(&a.base_ckpt)?;
    let (net, features) = load_gradnet(&a.gradnet_ckpt)?;
    let b = evaluate(&base, &test.images, &test.labels)?;
    let g = gradnet_evaluate(&base, &net, &test.images, &test.labels, &features)?;
    println!("base_accuracy,gradnet_accuracy,gain");
    println!("{b:.4},{g:.4},{}", format_gain(b, g));
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Diag,
    Full,
}

#[derive(Args)]
struct KernelGramArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Diag)]
    mode: ModeArg,
    /// Ridge added to the metric; defaults to 1e-6 times its mean diagonal.
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn kernel_gram_cmd(a: KernelGramArgs) -> Result<()> {
    let data = a.data.load()?;
    let base = load_checkpoint(&a.snapshot)?;
    let m = a.samples.min(data.half_b.len());
    let grads = (0..m)
        .map(|i| {
            extract_gradient(
                &base,
                data.half_b.images.image(i),
                data.half_b.labels.get(i),
            )
            .map(|g| g.flatten())
        })
        .collect::<gradfeat::Result<Vec<_>>>()?;
    let mode = match a.mode {
        ModeArg::Diag => MetricMode::Diagonal,
        ModeArg::Full => MetricMode::Full,
    };
    let mut metric = metric_accumulate(&grads, None, mode)?;
    if let Some(r) = a.ridge {
        metric = metric.with_ridge(r)?;
    }
    let gram = gram_matrix(&grads, &metric)?;
    fs::write(&a.out, gram_csv(&gram))?;
    println!("{m} samples, min eigenvalue {:.3e}", psd_check(&gram)?);
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum CandidateArg {
    /// The true label only.
    True,
    /// One uniformly random label per sample.
    Random,
    /// Every label.
    All,
}

#[derive(Args)]
struct ExtractFeaturesArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long)]
    base_ckpt: PathBuf,
    /// Which split to extract from.
    #[arg(long, value_enum, default_value_t = SetArg::B)]
    set: SetArg,
    #[arg(long, value_enum, default_value_t = CandidateArg::True)]
    candidates: CandidateArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetArg {
    A,
    B,
    Test,
}

fn extract_features_cmd(a: ExtractFeaturesArgs) -> Result<()> {
    let data = a.data.load()?;
    let set = match a.set {
        SetArg::A => &data.half_a,
        SetArg::B => &data.half_b,
        SetArg::Test => &data.test,
    };
    let base = load_checkpoint(&a.base_ckpt)?;
    let cfg = a.features.config()?;
    let n_classes = base.n_classes();
    let mut rng = seed::rng_from_seed(a.data.seed);
    let mut records = Vec::new();
    for i in 0..set.len() {
        let label = set.labels.get(i);
        let cands: Vec<usize> = match a.candidates {
            CandidateArg::True => vec![label],
            CandidateArg::Random => vec![rng.random_range(0..n_classes)],
            CandidateArg::All => (0..n_classes).collect(),
        };
        for c in cands {
            records.push(FeatureRecord {
                label: label as u8,
                candidate_label: c as u8,
                features: cfg.features(&base, set.images.image(i), c)?,
            });
        }
    }
    write_feature_records(BufWriter::new(fs::File::create(&a.out)?), &records)?;
    println!("{} records -> {}", records.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
struct RunPipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn run_pipeline_cmd(a: RunPipelineArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let report = run_pipeline(&cfg)?;
    emit_all(&report, &a.out_dir)?;
    for (stage, secs) in &report.timings {
        eprintln!("{stage}: {secs:.1}s");
    }
    print!("{}", gradfeat::harness::report_csv(&report));
    Ok(())
}

#[derive(Args)]
struct EmitReportArgs {
    /// JSON report produced by run-pipeline.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// json or csv; inferred from the output extension when omitted.
    #[arg(long)]
    format: Option<String>,
}

fn emit_report_cmd(a: EmitReportArgs) -> Result<()> {
    let report = read_report_json(&fs::read_to_string(&a.input)?)?;
    let format = match &a.format {
        Some(f) => ReportFormat::parse(f)?,
        None => ReportFormat::from_path(Path::new(&a.out))?,
    };
    emit_report(&report, &a.out, format)?;
    Ok(())
}

fn main() -> Result<()> {
    configure_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::TrainBase(a) => train_base_cmd(a),
        Command::TrainRbm(a) => train_rbm_cmd(a),
        Command::ProbeRbm(a) => probe_rbm_cmd(a),
        Command::TrainGradnet(a) => train_gradnet_cmd(a),
        Command::EvalGradnet(a) => eval_gradnet_cmd(a),
        Command::KernelGram(a) => kernel_gram_cmd(a),
        Command::ExtractFeatures(a) => extract_features_cmd(a),
        Command::RunPipeline(a) => run_pipeline_cmd(a),
        Command::EmitReport(a) => {
            if !a.input.is_file() {
                bail!("report {} not found", a.input.display());
            }
            emit_report_cmd(a)
        }
    }
}
