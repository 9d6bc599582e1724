//! GradNet: a shallow block-structured classifier over sparse gradient features.
//!
//! The hidden layer is partitioned into sublayers. Each sublayer sees only
//! some of the base network's gradient blocks (by default sublayer `j` sees
//! blocks `j` and `j + 1`), so it can combine gradients of adjacent base
//! layers without a dense connection to the whole parameter space. A softmax
//! output layer reads the concatenated sublayer activations.
//!
//! Training draws one random candidate label per sample, extracts the base
//! gradient for that candidate, and fits the real label. Prediction sums the
//! output distributions over every candidate label and takes the argmax.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_model::{
    argmax, read_f32s, read_header, read_layer_sizes, read_u32, softmax, write_header,
    write_layer_sizes, BaseModel,
};
use crate::data_io::{augment_image, Augmentation, Dataset, ImageSet, LabelSet};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, LayeredGradient, NormalizationSpec, SparseGradient};
use crate::optim::{Optimizer, OptimizerKind};
use crate::seed;

pub const GRADNET_CHECKPOINT_VERSION: u16 = 2;

/// Sublayer sizes and which gradient blocks feed each sublayer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    sublayer_sizes: Vec<usize>,
    connectivity: Vec<Vec<usize>>,
}

impl BlockSpec {
    /// Sublayer `j` reads blocks `j` and `j + 1`, both clamped to the last block.
    pub fn adjacent(sublayer_sizes: &[usize], n_blocks: usize) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::validation("GradNet needs at least one input block"));
        }
        if sublayer_sizes.len() > n_blocks + 1 {
            return Err(Error::validation(format!(
                "{} sublayers cannot be wired to {n_blocks} blocks",
                sublayer_sizes.len()
            )));
        }
        let last = n_blocks - 1;
        let connectivity = (0..sublayer_sizes.len())
            .map(|j| {
                let mut c = vec![j.min(last), (j + 1).min(last)];
                c.dedup();
                c
            })
            .collect();
        BlockSpec::with_connectivity(sublayer_sizes, connectivity, n_blocks)
    }

    pub fn with_connectivity(
        sublayer_sizes: &[usize],
        connectivity: Vec<Vec<usize>>,
        n_blocks: usize,
    ) -> Result<Self> {
        if sublayer_sizes.is_empty() || sublayer_sizes.contains(&0) {
            return Err(Error::validation(
                "sublayer sizes must be non-empty and positive",
            ));
        }
        if connectivity.len() != sublayer_sizes.len() {
            return Err(Error::validation(
                "one connectivity list per sublayer is required",
            ));
        }
        let mut fed = vec![false; n_blocks];
        for (j, blocks) in connectivity.iter().enumerate() {
            if blocks.is_empty() {
                return Err(Error::validation(format!(
                    "sublayer {j} has no input blocks"
                )));
            }
            if blocks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::validation(format!(
                    "sublayer {j} block list must be strictly increasing"
                )));
            }
            for &b in blocks {
                if b >= n_blocks {
                    return Err(Error::validation(format!(
                        "sublayer {j} references block {b} of {n_blocks}"
                    )));
                }
                fed[b] = true;
            }
        }
        if let Some(b) = fed.iter().position(|f| !f) {
            return Err(Error::validation(format!("block {b} feeds no sublayer")));
        }
        Ok(BlockSpec {
            sublayer_sizes: sublayer_sizes.to_vec(),
            connectivity,
        })
    }

    pub fn sublayer_sizes(&self) -> &[usize] {
        &self.sublayer_sizes
    }

    /// Zero-based block indices feeding each sublayer.
    pub fn connectivity(&self) -> &[Vec<usize>] {
        &self.connectivity
    }

    pub fn hidden_width(&self) -> usize {
        self.sublayer_sizes.iter().sum()
    }

    fn n_blocks(&self) -> usize {
        self.connectivity
            .iter()
            .flatten()
            .max()
            .map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Connection {
    block: usize,
    /// `block_len x units`, row `i` holds the weights of input index `i`.
    weights: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct Sublayer {
    units: usize,
    offset: usize,
    connections: Vec<Connection>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradNetModel {
    spec: BlockSpec,
    input_layout: Vec<usize>,
    n_classes: usize,
    sublayers: Vec<Sublayer>,
    /// `hidden x n_classes`, row-major.
    out_weights: Vec<f32>,
    out_bias: Vec<f32>,
}

fn glorot(rng: &mut seed::Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Builds a GradNet for gradients with block lengths `input_layout`.
pub fn gradnet_init(
    spec: &BlockSpec,
    input_layout: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<GradNetModel> {
    if spec.n_blocks() > input_layout.len() {
        return Err(Error::validation(format!(
            "block spec references {} blocks but the input has {}",
            spec.n_blocks(),
            input_layout.len()
        )));
    }
    if n_classes < 2 {
        return Err(Error::validation("GradNet needs at least two classes"));
    }
    let mut rng = seed::rng_from_seed(seed);
    let mut offset = 0;
    let sublayers = spec
        .sublayer_sizes
        .iter()
        .zip(&spec.connectivity)
        .map(|(&units, blocks)| {
            let fan_in: usize = blocks.iter().map(|&b| input_layout[b]).sum();
            let connections = blocks
                .iter()
                .map(|&b| Connection {
                    block: b,
                    weights: glorot(&mut rng, fan_in, units, input_layout[b] * units),
                })
                .collect();
            let s = Sublayer {
                units,
                offset,
                connections,
                bias: vec![0.0; units],
            };
            offset += units;
            s
        })
        .collect();
    let hidden = spec.hidden_width();
    Ok(GradNetModel {
        spec: spec.clone(),
        input_layout: input_layout.to_vec(),
        n_classes,
        sublayers,
        out_weights: glorot(&mut rng, hidden, n_classes, hidden * n_classes),
        out_bias: vec![0.0; n_classes],
    })
}

impl GradNetModel {
    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn input_layout(&self) -> &[usize] {
        &self.input_layout
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn hidden_width(&self) -> usize {
        self.spec.hidden_width()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().sum()
    }

    /// Lengths of the parameter tensors in optimizer-slot order.
    fn param_shapes(&self) -> Vec<usize> {
        let mut shapes = Vec::new();
        for s in &self.sublayers {
            shapes.extend(s.connections.iter().map(|c| c.weights.len()));
            shapes.push(s.bias.len());
        }
        shapes.push(self.out_weights.len());
        shapes.push(self.out_bias.len());
        shapes
    }

    fn check_layout(&self, layout: impl Iterator<Item = usize>) -> Result<()> {
        let layout: Vec<usize> = layout.collect();
        if layout != self.input_layout {
            return Err(Error::validation(format!(
                "feature layout {layout:?} does not match GradNet input {:?}",
                self.input_layout
            )));
        }
        Ok(())
    }
}

struct Activations {
    hidden: Vec<f32>,
    probabilities: Vec<f64>,
}

fn axpy(acc: &mut [f32], a: f32, row: &[f32]) {
    for (s, &w) in acc.iter_mut().zip(row) {
        *s += a * w;
    }
}

impl GradNetModel {
    fn preactivations(&self, sg: &SparseGradient) -> Vec<f32> {
        let mut z = vec![0.0f32; self.hidden_width()];
        for s in &self.sublayers {
            let acc = &mut z[s.offset..s.offset + s.units];
            acc.copy_from_slice(&s.bias);
            for c in &s.connections {
                let block = &sg.blocks[c.block];
                for (&i, &v) in block.indices.iter().zip(&block.values) {
                    if v == 0.0 {
                        continue;
                    }
                    let i = i as usize;
                    axpy(acc, v as f32, &c.weights[i * s.units..(i + 1) * s.units]);
                }
            }
        }
        z
    }

    fn head(&self, mut hidden: Vec<f32>) -> Activations {
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let c = self.n_classes;
        let mut logits: Vec<f64> = self.out_bias.iter().map(|&b| b as f64).collect();
        for (h, &a) in hidden.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (l, &w) in logits.iter_mut().zip(&self.out_weights[h * c..(h + 1) * c]) {
                *l += a as f64 * w as f64;
            }
        }
        Activations {
            hidden,
            probabilities: softmax(&logits),
        }
    }

    fn activations(&self, sg: &SparseGradient) -> Activations {
        self.head(self.preactivations(sg))
    }
}

/// Hidden pre-activations (before ReLU), sublayer after sublayer.
pub fn hidden_preactivations(net: &GradNetModel, sg: &SparseGradient) -> Result<Vec<f32>> {
    net.check_layout(sg.blocks.iter().map(|b| b.len))?;
    Ok(net.preactivations(sg))
}

/// Class probabilities for one sparse feature vector.
pub fn gradnet_forward(net: &GradNetModel, sg: &SparseGradient) -> Result<Vec<f64>> {
    net.check_layout(sg.blocks.iter().map(|b| b.len))?;
    Ok(net.activations(sg).probabilities)
}

/// Reference forward pass over dense blocks, visiting every input coordinate.
pub fn dense_forward(net: &GradNetModel, blocks: &[Vec<f64>]) -> Result<Vec<f64>> {
    net.check_layout(blocks.iter().map(Vec::len))?;
    let mut z = vec![0.0f32; net.hidden_width()];
    for s in &net.sublayers {
        let acc = &mut z[s.offset..s.offset + s.units];
        acc.copy_from_slice(&s.bias);
        for c in &s.connections {
            for (i, &v) in blocks[c.block].iter().enumerate() {
                axpy(acc, v as f32, &c.weights[i * s.units..(i + 1) * s.units]);
            }
        }
    }
    Ok(net.head(z).probabilities)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub features: FeatureConfig,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 64,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            features: FeatureConfig::default(),
            augmentation: Augmentation::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::validation(
                "learning rate must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        self.features.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when no monitoring set was given.
    pub test_accuracy: f64,
}

/// Per-sample quantities needed for the parameter update.
struct SampleGrad {
    hidden: Vec<f32>,
    d_hidden: Vec<f32>,
    d_logits: Vec<f64>,
    loss: f64,
}

fn sample_grad(net: &GradNetModel, sg: &SparseGradient, label: usize) -> SampleGrad {
    let act = net.activations(sg);
    let c = net.n_classes;
    let mut d_logits = act.probabilities.clone();
    d_logits[label] -= 1.0;
    let loss = -act.probabilities[label].max(f64::MIN_POSITIVE).ln();
    let d_hidden = act
        .hidden
        .iter()
        .enumerate()
        .map(|(h, &a)| {
            if a <= 0.0 {
                return 0.0;
            }
            let row = &net.out_weights[h * c..(h + 1) * c];
            row.iter()
                .zip(&d_logits)
                .map(|(&w, &d)| w as f64 * d)
                .sum::<f64>() as f32
        })
        .collect();
    SampleGrad {
        hidden: act.hidden,
        d_hidden,
        d_logits,
        loss,
    }
}

/// One mini-batch update on the mean cross-entropy against the real labels.
/// All per-sample gradients are taken at the pre-update parameters.
fn update(
    net: &mut GradNetModel,
    opt: &mut Optimizer,
    feats: &[SparseGradient],
    labels: &[usize],
) -> f64 {
    let grads: Vec<SampleGrad> = feats
        .par_iter()
        .zip(labels)
        .map(|(sg, &l)| sample_grad(net, sg, l))
        .collect();
    let scale = 1.0 / feats.len() as f64;
    let c = net.n_classes;
    let hidden = net.hidden_width();

    let mut g_out_w = vec![0.0f64; hidden * c];
    let mut g_out_b = vec![0.0f64; c];
    for g in &grads {
        for (h, &a) in g.hidden.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (acc, &d) in g_out_w[h * c..(h + 1) * c].iter_mut().zip(&g.d_logits) {
                *acc += scale * a as f64 * d;
            }
        }
        for (acc, &d) in g_out_b.iter_mut().zip(&g.d_logits) {
            *acc += scale * d;
        }
    }

    opt.begin_step();
    let mut slot = 0;
    let lr = opt.learning_rate();
    let sgd = matches!(opt.kind(), OptimizerKind::Sgd);
    let n_sub = net.sublayers.len();
    for si in 0..n_sub {
        let (units, offset) = (net.sublayers[si].units, net.sublayers[si].offset);
        for ci in 0..net.sublayers[si].connections.len() {
            let block = net.sublayers[si].connections[ci].block;
            if sgd {
                // Sparse update: only rows of kept indices move.
                let weights = &mut net.sublayers[si].connections[ci].weights;
                for (sg, g) in feats.iter().zip(&grads) {
                    let dh = &g.d_hidden[offset..offset + units];
                    if dh.iter().all(|&d| d == 0.0) {
                        continue;
                    }
                    let step: Vec<f32> = dh.iter().map(|&d| (-lr * scale) as f32 * d).collect();
                    let b = &sg.blocks[block];
                    for (&i, &v) in b.indices.iter().zip(&b.values) {
                        if v == 0.0 {
                            continue;
                        }
                        let i = i as usize;
                        axpy(&mut weights[i * units..(i + 1) * units], v as f32, &step);
                    }
                }
            } else {
                let len = net.sublayers[si].connections[ci].weights.len();
                let mut dense = vec![0.0f64; len];
                for (sg, g) in feats.iter().zip(&grads) {
                    let dh = &g.d_hidden[offset..offset + units];
                    let b = &sg.blocks[block];
                    for (&i, &v) in b.indices.iter().zip(&b.values) {
                        let i = i as usize;
                        for (acc, &d) in dense[i * units..(i + 1) * units].iter_mut().zip(dh) {
                            *acc += scale * v * d as f64;
                        }
                    }
                }
                opt.apply(slot, &mut net.sublayers[si].connections[ci].weights, &dense);
            }
            slot += 1;
        }
        let mut g_bias = vec![0.0f64; units];
        for g in &grads {
            for (acc, &d) in g_bias.iter_mut().zip(&g.d_hidden[offset..offset + units]) {
                *acc += scale * d as f64;
            }
        }
        opt.apply(slot, &mut net.sublayers[si].bias, &g_bias);
        slot += 1;
    }
    opt.apply(slot, &mut net.out_weights, &g_out_w);
    opt.apply(slot + 1, &mut net.out_bias, &g_out_b);
    grads.iter().map(|g| g.loss).sum()
}

/// Trains `net` on gradient features of the frozen `base` model.
///
/// Per batch: augment, draw a uniformly random candidate label for each
/// sample, extract and transform the candidate gradient, and take one
/// optimizer step on the cross-entropy against the real label. Candidate
/// labels are redrawn every epoch. When `monitor` is given, the test
/// accuracy on it is recorded after each epoch.
pub fn train_gradnet(
    base: &BaseModel,
    train: &Dataset,
    mut net: GradNetModel,
    cfg: &TrainConfig,
    monitor: Option<&Dataset>,
) -> Result<(GradNetModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    net.check_layout(base.block_lengths().into_iter())?;
    let n_classes = base.n_classes();
    if n_classes != net.n_classes {
        return Err(Error::validation(
            "GradNet and base model disagree on the class count",
        ));
    }
    train.labels.validate(n_classes)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &net.param_shapes());
    let (h, w) = (train.images.height(), train.images.width());
    let root = seed::derive_seed(cfg.seed, seed::stream::GRADNET_TRAIN);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream_rng(root, epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let drawn: Vec<(Vec<f32>, usize)> = batch
                .iter()
                .map(|&i| {
                    let img =
                        augment_image(train.images.image(i), h, w, cfg.augmentation, &mut rng);
                    (img, rng.random_range(0..n_classes))
                })
                .collect();
            let feats = drawn
                .par_iter()
                .map(|(img, cand)| cfg.features.features(base, img, *cand))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels.get(i)).collect();
            loss_sum += update(&mut net, &mut opt, &feats, &labels);
        }
        let test_accuracy = match monitor {
            Some(m) => gradnet_evaluate(base, &net, &m.images, &m.labels, &cfg.features)?,
            None => f64::NAN,
        };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: if train.is_empty() {
                0.0
            } else {
                loss_sum / train.len() as f64
            },
            test_accuracy,
        });
    }
    Ok((net, metrics))
}

/// Feature vectors of `x` for every candidate label, in label order.
pub fn candidate_features(
    base: &BaseModel,
    x: &[f32],
    features: &FeatureConfig,
) -> Result<Vec<SparseGradient>> {
    (0..base.n_classes())
        .map(|c| features.features(base, x, c))
        .collect()
}

/// Same as [`candidate_features`] from already extracted gradients.
pub fn transform_candidates(
    grads: &[LayeredGradient],
    features: &FeatureConfig,
) -> Result<Vec<SparseGradient>> {
    grads.iter().map(|g| features.transform(g)).collect()
}

/// Sum of the output distributions over all candidate feature vectors.
pub fn summed_scores(net: &GradNetModel, candidates: &[SparseGradient]) -> Result<Vec<f64>> {
    let mut total = vec![0.0; net.n_classes];
    for sg in candidates {
        for (t, p) in total.iter_mut().zip(gradnet_forward(net, sg)?) {
            *t += p;
        }
    }
    Ok(total)
}

pub fn predict_from_features(net: &GradNetModel, candidates: &[SparseGradient]) -> Result<usize> {
    Ok(argmax(&summed_scores(net, candidates)?))
}

/// `argmax_c sum_{candidate} GradNet(features(x, candidate))`, lowest class on ties.
pub fn predict(
    base: &BaseModel,
    net: &GradNetModel,
    x: &[f32],
    features: &FeatureConfig,
) -> Result<usize> {
    predict_from_features(net, &candidate_features(base, x, features)?)
}

pub fn gradnet_evaluate(
    base: &BaseModel,
    net: &GradNetModel,
    images: &ImageSet,
    labels: &LabelSet,
    features: &FeatureConfig,
) -> Result<f64> {
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
    let correct: usize = (0..images.count())
        .into_par_iter()
        .map(|i| Ok((predict(base, net, images.image(i), features)? == labels.get(i)) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / images.count() as f64)
}

/// Serializes the network and the feature settings it was trained with.
/// Label masks are not stored.
pub fn encode_gradnet(net: &GradNetModel, features: &FeatureConfig) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, GRADNET_CHECKPOINT_VERSION);
    out.write_u32::<LittleEndian>(net.n_classes as u32).unwrap();
    write_layer_sizes(&mut out, &net.input_layout);
    out.write_u32::<LittleEndian>(net.sublayers.len() as u32)
        .unwrap();
    for (s, blocks) in net.sublayers.iter().zip(&net.spec.connectivity) {
        out.write_u32::<LittleEndian>(s.units as u32).unwrap();
        write_layer_sizes(&mut out, blocks);
    }
    out.write_f64::<LittleEndian>(features.percentile).unwrap();
    let norm = features.norm.to_string();
    out.write_u32::<LittleEndian>(norm.len() as u32).unwrap();
    out.extend_from_slice(norm.as_bytes());
    let mut put = |v: &[f32]| {
        for &p in v {
            out.write_f32::<LittleEndian>(p).unwrap();
        }
    };
    for s in &net.sublayers {
        for c in &s.connections {
            put(&c.weights);
        }
        put(&s.bias);
    }
    put(&net.out_weights);
    put(&net.out_bias);
    out
}

pub fn decode_gradnet(bytes: &[u8]) -> Result<(GradNetModel, FeatureConfig)> {
    let fmt = |e: Error| match e {
        Error::Validation(m) => Error::Format(m),
        other => other,
    };
    let mut cur = Cursor::new(bytes);
    read_header(&mut cur, GRADNET_CHECKPOINT_VERSION)?;
    let n_classes = read_u32(&mut cur)? as usize;
    let layout = read_layer_sizes(&mut cur)?;
    let n_sub = read_u32(&mut cur)? as usize;
    if n_sub > 1024 {
        return Err(Error::format(format!("implausible sublayer count {n_sub}")));
    }
    let mut sizes = Vec::with_capacity(n_sub);
    let mut connectivity = Vec::with_capacity(n_sub);
    for _ in 0..n_sub {
        sizes.push(read_u32(&mut cur)? as usize);
        connectivity.push(read_layer_sizes(&mut cur)?);
    }
    let spec = BlockSpec::with_connectivity(&sizes, connectivity, layout.len()).map_err(fmt)?;
    let percentile = cur.read_f64::<LittleEndian>().map_err(|_| Error::Length {
        expected: cur.position() as usize + 8,
        found: bytes.len(),
    })?;
    let norm_len = read_u32(&mut cur)? as usize;
    let start = cur.position() as usize;
    let norm_bytes = bytes.get(start..start + norm_len).ok_or(Error::Length {
        expected: start + norm_len,
        found: bytes.len(),
    })?;
    let norm: NormalizationSpec = std::str::from_utf8(norm_bytes)
        .map_err(|_| Error::format("normalization chain is not UTF-8"))?
        .parse()
        .map_err(fmt)?;
    cur.set_position((start + norm_len) as u64);

    let mut net = gradnet_init(&spec, &layout, n_classes, 0).map_err(fmt)?;
    for s in &mut net.sublayers {
        for c in &mut s.connections {
            c.weights = read_f32s(&mut cur, c.weights.len())?;
        }
        s.bias = read_f32s(&mut cur, s.bias.len())?;
    }
    net.out_weights = read_f32s(&mut cur, net.out_weights.len())?;
    net.out_bias = read_f32s(&mut cur, net.out_bias.len())?;
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::format("trailing bytes after GradNet checkpoint"));
    }
    let features = FeatureConfig {
        percentile,
        norm,
        label_masks: None,
    };
    features.validate().map_err(fmt)?;
    Ok((net, features))
}

pub fn save_gradnet(
    net: &GradNetModel,
    features: &FeatureConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, encode_gradnet(net, features))?;
    Ok(())
}

pub fn load_gradnet(path: impl AsRef<Path>) -> Result<(GradNetModel, FeatureConfig)> {
    decode_gradnet(&fs::read(path)?)
}
