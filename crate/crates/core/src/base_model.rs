//! The weakly trained feedforward base network.
//!
//! A ReLU multi-layer perceptron with a softmax/cross-entropy head. Parameters
//! are stored as `f32`; forward and backward passes accumulate in `f64`.
//! Each layer keeps its parameters as one flat tensor: the `outputs x inputs`
//! weight matrix in row-major order followed by the bias vector. The same
//! layout is used for gradients and for checkpoints.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, ImageSet, LabelSet};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GRDN";
pub const BASE_CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    inputs: usize,
    outputs: usize,
    params: Vec<f32>,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Weights followed by biases.
    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Row-major `outputs x inputs`.
    pub fn weights(&self) -> &[f32] {
        &self.params[..self.inputs * self.outputs]
    }

    pub fn biases(&self) -> &[f32] {
        &self.params[self.inputs * self.outputs..]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    layers: Vec<DenseLayer>,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::validation(
            "a base model needs at least two layer sizes",
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::validation("layer sizes must be positive"));
    }
    Ok(())
}

impl BaseModel {
    /// Builds a model from explicit per-layer parameter tensors.
    pub fn from_params(sizes: &[usize], params: Vec<Vec<f32>>) -> Result<Self> {
        validate_sizes(sizes)?;
        if params.len() != sizes.len() - 1 {
            return Err(Error::validation(format!(
                "{} layers need {} parameter tensors, got {}",
                sizes.len(),
                sizes.len() - 1,
                params.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(params)
            .map(|(w, p)| {
                let (inputs, outputs) = (w[0], w[1]);
                if p.len() != inputs * outputs + outputs {
                    return Err(Error::validation(format!(
                        "layer {inputs}->{outputs} needs {} parameters, got {}",
                        inputs * outputs + outputs,
                        p.len()
                    )));
                }
                Ok(DenseLayer {
                    inputs,
                    outputs,
                    params: p,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BaseModel { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].inputs];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Parameter count of each layer, i.e. the gradient block lengths.
    pub fn block_lengths(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::param_count).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().copied())
            .collect()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn mlp_init(layer_sizes: &[usize], seed: u64) -> Result<BaseModel> {
    validate_sizes(layer_sizes)?;
    let mut rng = seed::rng_from_seed(seed);
    let params = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let mut p: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| dist.sample(&mut rng))
                .collect();
            p.resize(fan_in * fan_out + fan_out, 0.0);
            p
        })
        .collect();
    BaseModel::from_params(layer_sizes, params)
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[0]` is the input; `activations[l]` the ReLU output of hidden layer `l`.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

fn affine(layer: &DenseLayer, input: &[f64]) -> Vec<f64> {
    let w = layer.weights();
    layer
        .biases()
        .iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
            b as f64
                + row
                    .iter()
                    .zip(input)
                    .map(|(&wi, &xi)| wi as f64 * xi)
                    .sum::<f64>()
        })
        .collect()
}

pub fn forward(model: &BaseModel, x: &[f32]) -> Result<ForwardPass> {
    if x.len() != model.input_len() {
        return Err(Error::validation(format!(
            "input has {} values, model expects {}",
            x.len(),
            model.input_len()
        )));
    }
    let mut activations = vec![x.iter().map(|&v| v as f64).collect::<Vec<_>>()];
    let last = model.layers.len() - 1;
    for layer in &model.layers[..last] {
        let mut z = affine(layer, activations.last().unwrap());
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        activations.push(z);
    }
    let logits = affine(&model.layers[last], activations.last().unwrap());
    let probabilities = softmax(&logits);
    Ok(ForwardPass {
        activations,
        logits,
        probabilities,
    })
}

/// `argmax` of the output, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_class(model: &BaseModel, x: &[f32]) -> Result<usize> {
    Ok(argmax(&forward(model, x)?.logits))
}

/// Gradient of a single-sample loss, one block per layer in parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub blocks: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl ParamGradient {
    pub fn zeros_like(model: &BaseModel) -> Self {
        ParamGradient {
            blocks: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.param_count()])
                .collect(),
            shapes: model.layers.iter().map(|l| (l.inputs, l.outputs)).collect(),
        }
    }

    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        let (i, o) = self.shapes[layer];
        &self.blocks[layer][..i * o]
    }

    pub fn layer_biases(&self, layer: usize) -> &[f64] {
        let (i, o) = self.shapes[layer];
        &self.blocks[layer][i * o..]
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.concat()
    }
}

fn check_label(model: &BaseModel, label: usize) -> Result<()> {
    if label >= model.n_classes() {
        return Err(Error::validation(format!(
            "label {label} is not below {} classes",
            model.n_classes()
        )));
    }
    Ok(())
}

/// Adds `scale * grad l(x; label)` into `sink`. Returns the loss.
fn backprop_into(
    model: &BaseModel,
    pass: &ForwardPass,
    label: usize,
    sink: &mut [Vec<f64>],
    scale: f64,
) -> f64 {
    let loss = log_sum_exp(&pass.logits) - pass.logits[label];
    let mut delta = pass.probabilities.clone();
    delta[label] -= 1.0;
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let input = &pass.activations[l];
        let block = &mut sink[l];
        let (n_in, n_out) = (layer.inputs, layer.outputs);
        for o in 0..n_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let sd = scale * d;
            let row = &mut block[o * n_in..(o + 1) * n_in];
            for (g, &a) in row.iter_mut().zip(input) {
                *g += sd * a;
            }
            block[n_in * n_out + o] += sd;
        }
        if l == 0 {
            break;
        }
        let w = layer.weights();
        let mut prev = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (p, &wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *p += wi as f64 * d;
            }
        }
        // ReLU subgradient: zero wherever the unit is inactive, including exactly at 0.
        for (p, &a) in prev.iter_mut().zip(input) {
            if a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    loss
}

/// Cross-entropy `-ln p(label | x)` and its exact single-sample gradient.
pub fn loss_and_gradient(
    model: &BaseModel,
    x: &[f32],
    label: usize,
) -> Result<(f64, ParamGradient)> {
    check_label(model, label)?;
    let pass = forward(model, x)?;
    let mut grad = ParamGradient::zeros_like(model);
    let loss = backprop_into(model, &pass, label, &mut grad.blocks, 1.0);
    Ok((loss, grad))
}

pub fn loss(model: &BaseModel, x: &[f32], label: usize) -> Result<f64> {
    check_label(model, label)?;
    let pass = forward(model, x)?;
    Ok(log_sum_exp(&pass.logits) - pass.logits[label])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::validation(
                "learning rate must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Runs one optimizer update on the mean loss of `batch` (sample indices into `data`).
/// Returns the summed loss of the batch.
pub fn train_step(
    model: &mut BaseModel,
    optimizer: &mut Optimizer,
    data: &Dataset,
    batch: &[usize],
) -> Result<f64> {
    let mut grad = ParamGradient::zeros_like(model);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        let label = data.labels.get(i);
        check_label(model, label)?;
        let pass = forward(model, data.images.image(i))?;
        total += backprop_into(model, &pass, label, &mut grad.blocks, scale);
    }
    optimizer.begin_step();
    for (slot, (layer, g)) in model.layers.iter_mut().zip(&grad.blocks).enumerate() {
        optimizer.apply(slot, &mut layer.params, g);
    }
    Ok(total)
}

/// When to snapshot the model during [`train_base`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    /// Ascending accuracies in `(0, 1)`.
    pub thresholds: Vec<f64>,
    /// Test-set evaluations per epoch (1 = end of epoch only).
    pub evals_per_epoch: usize,
    /// Stop training once every threshold has a snapshot.
    pub stop_when_complete: bool,
}

impl CheckpointPlan {
    pub fn thresholds(thresholds: Vec<f64>) -> Self {
        CheckpointPlan {
            thresholds,
            evals_per_epoch: 1,
            stop_when_complete: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.evals_per_epoch == 0 {
            return Err(Error::validation("evals_per_epoch must be at least 1"));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::validation(
                "checkpoint accuracies must lie in (0, 1)",
            ));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "checkpoint accuracies must be strictly ascending",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub threshold: f64,
    pub accuracy: f64,
    /// Fractional epoch at which the snapshot was taken.
    pub epoch: f64,
    pub model: BaseModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct BaseTraining {
    pub model: BaseModel,
    pub snapshots: Vec<Snapshot>,
    /// Thresholds that were never reached.
    pub missing: Vec<f64>,
    pub curve: Vec<EvalPoint>,
}

/// Mini-batch training of the mean cross-entropy, snapshotting the model
/// the first time its test accuracy reaches each threshold of `plan`.
pub fn train_base(
    mut model: BaseModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &SgdConfig,
    plan: &CheckpointPlan,
) -> Result<BaseTraining> {
    cfg.validate()?;
    plan.validate()?;
    train.labels.validate(model.n_classes())?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.block_lengths());
    let mut snapshots = Vec::new();
    let mut curve = Vec::new();
    let mut pending = plan.thresholds.iter().copied().peekable();
    let n_batches = train.len().div_ceil(cfg.batch_size);
    let epoch_root = seed::derive_seed(cfg.seed, seed::stream::BASE_TRAIN);

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::stream_rng(epoch_root, epoch as u64));
        let mut next_eval = 1;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            loss_sum += train_step(&mut model, &mut optimizer, train, batch)?;
            loss_count += batch.len();
            let due = (next_eval * n_batches).div_ceil(plan.evals_per_epoch);
            if b + 1 < due {
                continue;
            }
            next_eval += 1;
            let at = epoch as f64 + (b + 1) as f64 / n_batches as f64;
            let accuracy = evaluate(&model, &test.images, &test.labels)?;
            curve.push(EvalPoint {
                epoch: at,
                train_loss: loss_sum / loss_count as f64,
                test_accuracy: accuracy,
            });
            loss_sum = 0.0;
            loss_count = 0;
            while let Some(&threshold) = pending.peek() {
                if accuracy < threshold {
                    break;
                }
                pending.next();
                snapshots.push(Snapshot {
                    threshold,
                    accuracy,
                    epoch: at,
                    model: model.clone(),
                });
            }
            if plan.stop_when_complete && pending.peek().is_none() && !plan.thresholds.is_empty() {
                break 'epochs;
            }
        }
    }
    Ok(BaseTraining {
        model,
        snapshots,
        missing: pending.collect(),
        curve,
    })
}

/// Fraction of argmax-correct predictions (ties to the lowest class index).
pub fn evaluate(model: &BaseModel, images: &ImageSet, labels: &LabelSet) -> Result<f64> {
    if images.count() != labels.count() {
        return Err(Error::validation(format!(
            "{} images but {} labels",
            images.count(),
            labels.count()
        )));
    }
    if images.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty set"));
    }
    let correct = (0..images.count())
        .into_par_iter()
        .map(|i| Ok((predict_class(model, images.image(i))? == labels.get(i)) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / images.count() as f64)
}

pub fn encode_checkpoint(model: &BaseModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * model.param_count());
    write_header(&mut out, BASE_CHECKPOINT_VERSION);
    write_layer_sizes(&mut out, &model.layer_sizes());
    for layer in &model.layers {
        for &p in &layer.params {
            out.write_f32::<LittleEndian>(p).unwrap();
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BaseModel> {
    let mut cur = Cursor::new(bytes);
    read_header(&mut cur, BASE_CHECKPOINT_VERSION)?;
    let sizes = read_layer_sizes(&mut cur)?;
    validate_sizes(&sizes).map_err(|e| Error::format(e.to_string()))?;
    let mut params = Vec::with_capacity(sizes.len() - 1);
    for w in sizes.windows(2) {
        params.push(read_f32s(&mut cur, w[0] * w[1] + w[1])?);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint payload"));
    }
    BaseModel::from_params(&sizes, params)
}

pub fn save_checkpoint(model: &BaseModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BaseModel> {
    decode_checkpoint(&fs::read(path)?)
}

pub(crate) fn write_header(out: &mut Vec<u8>, version: u16) {
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u16::<LittleEndian>(version).unwrap();
}

pub(crate) fn write_layer_sizes(out: &mut Vec<u8>, sizes: &[usize]) {
    out.write_u32::<LittleEndian>(sizes.len() as u32).unwrap();
    for &s in sizes {
        out.write_u32::<LittleEndian>(s as u32).unwrap();
    }
}

fn short(cur: &Cursor<&[u8]>, need: usize) -> Error {
    Error::Length {
        expected: cur.position() as usize + need,
        found: cur.get_ref().len(),
    }
}

pub(crate) fn read_header(cur: &mut Cursor<&[u8]>, version: u16) -> Result<()> {
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(cur, &mut magic).map_err(|_| short(cur, 4))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let found = cur.read_u16::<LittleEndian>().map_err(|_| short(cur, 2))?;
    if found != version {
        return Err(Error::format(format!(
            "checkpoint version {found}, expected {version}"
        )));
    }
    Ok(())
}

pub(crate) fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    cur.read_u32::<LittleEndian>().map_err(|_| short(cur, 4))
}

pub(crate) fn read_layer_sizes(cur: &mut Cursor<&[u8]>) -> Result<Vec<usize>> {
    let n = read_u32(cur)? as usize;
    if n > 1024 {
        return Err(Error::format(format!("implausible layer count {n}")));
    }
    (0..n).map(|_| read_u32(cur).map(|v| v as usize)).collect()
}

pub(crate) fn read_f32s(cur: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f32>> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if remaining < 4 * n {
        return Err(short(cur, 4 * n));
    }
    let mut v = vec![0.0f32; n];
    cur.read_f32_into::<LittleEndian>(&mut v)
        .map_err(|_| short(cur, 4 * n))?;
    Ok(v)
}
