//! Binary restricted Boltzmann machine, its free-energy gradient features,
//! and a linear softmax probe for comparing representations.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::base_model::{argmax, read_header, read_u32, softmax, write_header, SgdConfig};
use crate::data_io::ImageSet;
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::seed;

pub const RBM_CHECKPOINT_VERSION: u16 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Rbm {
    n_visible: usize,
    n_hidden: usize,
    /// `n_visible x n_hidden`, row-major.
    pub weights: Vec<f64>,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

impl Rbm {
    pub fn from_parts(
        n_visible: usize,
        n_hidden: usize,
        weights: Vec<f64>,
        visible_bias: Vec<f64>,
        hidden_bias: Vec<f64>,
    ) -> Result<Self> {
        if n_visible == 0 || n_hidden == 0 {
            return Err(Error::validation("RBM dimensions must be positive"));
        }
        if weights.len() != n_visible * n_hidden
            || visible_bias.len() != n_visible
            || hidden_bias.len() != n_hidden
        {
            return Err(Error::validation("RBM parameter shapes are inconsistent"));
        }
        let rbm = Rbm {
            n_visible,
            n_hidden,
            weights,
            visible_bias,
            hidden_bias,
        };
        if !rbm.params().all(f64::is_finite) {
            return Err(Error::validation("RBM parameters must be finite"));
        }
        Ok(rbm)
    }

    pub fn n_visible(&self) -> usize {
        self.n_visible
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn param_count(&self) -> usize {
        self.n_visible * self.n_hidden + self.n_visible + self.n_hidden
    }

    /// Weights, then visible biases, then hidden biases.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .chain(&self.visible_bias)
            .chain(&self.hidden_bias)
            .copied()
    }

    fn param_mut(&mut self, k: usize) -> &mut f64 {
        let nw = self.weights.len();
        if k < nw {
            &mut self.weights[k]
        } else if k < nw + self.n_visible {
            &mut self.visible_bias[k - nw]
        } else {
            &mut self.hidden_bias[k - nw - self.n_visible]
        }
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.n_visible {
            return Err(Error::Length {
                expected: self.n_visible,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// `b_hidden + W^T x`.
    fn hidden_input(&self, x: &[f32]) -> Vec<f64> {
        let h = self.n_hidden;
        let mut z = self.hidden_bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (zj, &w) in z.iter_mut().zip(&self.weights[i * h..(i + 1) * h]) {
                *zj += xi as f64 * w;
            }
        }
        z
    }

    /// `b_visible + W h`.
    fn visible_input(&self, h: &[f64]) -> Vec<f64> {
        let nh = self.n_hidden;
        (0..self.n_visible)
            .map(|i| {
                let row = &self.weights[i * nh..(i + 1) * nh];
                self.visible_bias[i] + row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// `W ~ 0.01 * N(0, 1)`, zero biases.
pub fn rbm_init(n_visible: usize, n_hidden: usize, seed: u64) -> Result<Rbm> {
    if n_visible == 0 || n_hidden == 0 {
        return Err(Error::validation("RBM dimensions must be positive"));
    }
    let mut rng = seed::rng_from_seed(seed);
    let weights = (0..n_visible * n_hidden)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.01 * z
        })
        .collect::<Vec<f64>>();
    Rbm::from_parts(
        n_visible,
        n_hidden,
        weights,
        vec![0.0; n_visible],
        vec![0.0; n_hidden],
    )
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `F(x) = -b_v^T x - sum_j softplus(b_h_j + W_j^T x)`.
pub fn free_energy(rbm: &Rbm, x: &[f32]) -> Result<f64> {
    rbm.check_input(x)?;
    let visible: f64 = rbm
        .visible_bias
        .iter()
        .zip(x)
        .map(|(b, &v)| b * v as f64)
        .sum();
    Ok(-visible - rbm.hidden_input(x).into_iter().map(softplus).sum::<f64>())
}

/// `p(h_j = 1 | x)` for every hidden unit.
pub fn hidden_probabilities(rbm: &Rbm, x: &[f32]) -> Result<Vec<f64>> {
    rbm.check_input(x)?;
    Ok(rbm.hidden_input(x).into_iter().map(sigmoid).collect())
}

/// Dense `grad_theta F(x)` in [`Rbm::params`] order.
pub fn rbm_gradient_features(rbm: &Rbm, x: &[f32]) -> Result<Vec<f64>> {
    let s = hidden_probabilities(rbm, x)?;
    let mut out = Vec::with_capacity(rbm.param_count());
    for &xi in x {
        out.extend(s.iter().map(|&sj| -(xi as f64) * sj));
    }
    out.extend(x.iter().map(|&xi| -(xi as f64)));
    out.extend(s.iter().map(|&sj| -sj));
    Ok(out)
}

/// Sparse vector of fixed dimension with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseVector {
    pub fn from_dense(v: &[f64]) -> Self {
        let (indices, values) = v
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, &x)| (i as u32, x as f32))
            .unzip();
        SparseVector {
            dim: v.len(),
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (&i, &x) in self.indices.iter().zip(&self.values) {
            v[i as usize] = x as f64;
        }
        v
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// The free-energy gradient scaled to unit L2 norm (a zero gradient stays zero).
/// Zero pixels contribute exact zeros, so only the support is stored.
pub fn normalized_gradient_features(rbm: &Rbm, x: &[f32]) -> Result<SparseVector> {
    let s = hidden_probabilities(rbm, x)?;
    let nh = rbm.n_hidden;
    let nw = rbm.weights.len();
    let mut indices = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (j, &sj) in s.iter().enumerate() {
                indices.push((i * nh + j) as u32);
                values.push(-(xi as f64) * sj);
            }
        }
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            indices.push((nw + i) as u32);
            values.push(-(xi as f64));
        }
    }
    for (j, &sj) in s.iter().enumerate() {
        indices.push((nw + rbm.n_visible + j) as u32);
        values.push(-sj);
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    Ok(SparseVector {
        dim: rbm.param_count(),
        indices,
        values: values.into_iter().map(|v| (v * scale) as f32).collect(),
    })
}

fn bernoulli(rng: &mut seed::Rng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// One CD-1 step in place. Visible inputs are treated as probabilities in
/// the positive phase; the negative phase samples hidden, then visible
/// states, and uses the hidden probabilities of the sampled visibles.
pub fn cd1_step(
    rbm: &mut Rbm,
    batch: &[&[f32]],
    learning_rate: f64,
    rng: &mut seed::Rng,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::validation("CD-1 needs a non-empty batch"));
    }
    for x in batch {
        rbm.check_input(x)?;
    }
    let (nv, nh) = (rbm.n_visible, rbm.n_hidden);
    let mut d_w = vec![0.0; nv * nh];
    let mut d_v = vec![0.0; nv];
    let mut d_h = vec![0.0; nh];
    for x in batch {
        let h0 = hidden_probabilities(rbm, x)?;
        let h_sample: Vec<f64> = h0.iter().map(|&p| bernoulli(rng, p)).collect();
        let v1: Vec<f32> = rbm
            .visible_input(&h_sample)
            .into_iter()
            .map(|z| bernoulli(rng, sigmoid(z)) as f32)
            .collect();
        let h1 = hidden_probabilities(rbm, &v1)?;
        for i in 0..nv {
            let (a, b) = (x[i] as f64, v1[i] as f64);
            d_v[i] += a - b;
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let row = &mut d_w[i * nh..(i + 1) * nh];
            for j in 0..nh {
                row[j] += a * h0[j] - b * h1[j];
            }
        }
        for j in 0..nh {
            d_h[j] += h0[j] - h1[j];
        }
    }
    let step = learning_rate / batch.len() as f64;
    for (p, d) in rbm.weights.iter_mut().zip(&d_w) {
        *p += step * d;
    }
    for (p, d) in rbm.visible_bias.iter_mut().zip(&d_v) {
        *p += step * d;
    }
    for (p, d) in rbm.hidden_bias.iter_mut().zip(&d_h) {
        *p += step * d;
    }
    Ok(())
}

/// Functional form of [`cd1_step`] with its own seeded generator.
pub fn cd1_update(rbm: &Rbm, batch: &[&[f32]], learning_rate: f64, seed: u64) -> Result<Rbm> {
    let mut next = rbm.clone();
    cd1_step(
        &mut next,
        batch,
        learning_rate,
        &mut seed::rng_from_seed(seed),
    )?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RbmTrainConfig {
    pub n_hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RbmTrainConfig {
    fn default() -> Self {
        RbmTrainConfig {
            n_hidden: 16,
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Initializes and trains an RBM with CD-1 over shuffled mini-batches.
pub fn train_rbm(images: &ImageSet, cfg: &RbmTrainConfig) -> Result<Rbm> {
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(Error::validation(
            "learning rate must be finite and non-negative",
        ));
    }
    let mut rbm = rbm_init(
        images.image_len(),
        cfg.n_hidden,
        seed::derive_seed(cfg.seed, seed::stream::RBM_INIT),
    )?;
    let root = seed::derive_seed(cfg.seed, seed::stream::RBM_TRAIN);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream_rng(root, epoch as u64);
        let mut order: Vec<usize> = (0..images.count()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f32]> = chunk.iter().map(|&i| images.image(i)).collect();
            cd1_step(&mut rbm, &batch, cfg.learning_rate, &mut rng)?;
        }
    }
    Ok(rbm)
}

/// Mean squared error of the mean-field reconstruction `p(v | p(h | x))`.
pub fn reconstruction_error(rbm: &Rbm, images: &ImageSet) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation(
            "cannot measure reconstruction on an empty set",
        ));
    }
    let total: f64 = images
        .iter()
        .map(|x| {
            let h = hidden_probabilities(rbm, x)?;
            Ok(rbm
                .visible_input(&h)
                .into_iter()
                .zip(x)
                .map(|(z, &v)| (sigmoid(z) - v as f64).powi(2))
                .sum::<f64>())
        })
        .sum::<Result<f64>>()?;
    Ok(total / (images.count() * rbm.n_visible) as f64)
}

pub fn save_rbm(rbm: &Rbm, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_rbm(rbm))?;
    Ok(())
}

pub fn load_rbm(path: impl AsRef<Path>) -> Result<Rbm> {
    decode_rbm(&fs::read(path)?)
}

/// Header, `n_visible`, `n_hidden`, then every parameter as `f64` LE.
pub fn encode_rbm(rbm: &Rbm) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 8 * rbm.param_count());
    write_header(&mut out, RBM_CHECKPOINT_VERSION);
    out.write_u32::<LittleEndian>(rbm.n_visible as u32).unwrap();
    out.write_u32::<LittleEndian>(rbm.n_hidden as u32).unwrap();
    for p in rbm.params() {
        out.write_f64::<LittleEndian>(p).unwrap();
    }
    out
}

pub fn decode_rbm(bytes: &[u8]) -> Result<Rbm> {
    let mut cur = Cursor::new(bytes);
    read_header(&mut cur, RBM_CHECKPOINT_VERSION)?;
    let nv = read_u32(&mut cur)? as usize;
    let nh = read_u32(&mut cur)? as usize;
    let n = nv
        .checked_mul(nh)
        .and_then(|w| w.checked_add(nv + nh))
        .ok_or_else(|| Error::format("RBM dimensions overflow"))?;
    let start = cur.position() as usize;
    let expected = start + 8 * n;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len(),
        });
    }
    let mut params = vec![0.0f64; n];
    cur.read_f64_into::<LittleEndian>(&mut params)?;
    let hb = params.split_off(nv * nh + nv);
    let vb = params.split_off(nv * nh);
    Rbm::from_parts(nv, nh, params, vb, hb).map_err(|e| Error::format(e.to_string()))
}

/// Multinomial logistic regression on fixed-dimension inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    dim: usize,
    n_classes: usize,
    /// `n_classes x dim`, row-major.
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn logits(&self, x: &SparseVector) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] as f64
                    + x.indices
                        .iter()
                        .zip(&x.values)
                        .map(|(&i, &v)| row[i as usize] as f64 * v as f64)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &SparseVector) -> Result<Vec<f64>> {
        if x.dim != self.dim {
            return Err(Error::Length {
                expected: self.dim,
                found: x.dim,
            });
        }
        Ok(softmax(&self.logits(x)))
    }

    pub fn predict(&self, x: &SparseVector) -> Result<usize> {
        Ok(argmax(&self.probabilities(x)?))
    }
}

fn check_probe_inputs(features: &[SparseVector], labels: &[usize]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features
        .first()
        .map(|f| f.dim)
        .ok_or_else(|| Error::validation("no training features"))?;
    if let Some(f) = features.iter().find(|f| f.dim != dim) {
        return Err(Error::validation(format!(
            "feature dimension {} differs from {dim}",
            f.dim
        )));
    }
    Ok(dim)
}

/// Mini-batch training of the mean cross-entropy from zero weights.
pub fn train_linear_probe(
    features: &[SparseVector],
    labels: &[usize],
    n_classes: usize,
    cfg: &SgdConfig,
) -> Result<LinearProbe> {
    cfg.validate()?;
    let dim = check_probe_inputs(features, labels)?;
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::validation(format!(
            "label {l} outside 0..{n_classes}"
        )));
    }
    let mut probe = LinearProbe {
        dim,
        n_classes,
        weights: vec![0.0; n_classes * dim],
        bias: vec![0.0; n_classes],
    };
    let mut opt = Optimizer::new(
        cfg.optimizer,
        cfg.learning_rate,
        &[n_classes * dim, n_classes],
    );
    let mut g_w = vec![0.0f64; n_classes * dim];
    let root = seed::derive_seed(cfg.seed, seed::stream::PROBE_TRAIN);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream_rng(root, epoch as u64);
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            let deltas: Vec<Vec<f64>> = chunk
                .par_iter()
                .map(|&k| {
                    let mut p = softmax(&probe.logits(&features[k]));
                    p[labels[k]] -= 1.0;
                    p
                })
                .collect();
            let mut g_b = vec![0.0f64; n_classes];
            g_w.iter_mut().for_each(|g| *g = 0.0);
            for (&k, d) in chunk.iter().zip(&deltas) {
                let x = &features[k];
                for c in 0..n_classes {
                    g_b[c] += scale * d[c];
                    let row = &mut g_w[c * dim..(c + 1) * dim];
                    for (&i, &v) in x.indices.iter().zip(&x.values) {
                        row[i as usize] += scale * d[c] * v as f64;
                    }
                }
            }
            opt.begin_step();
            opt.apply(0, &mut probe.weights, &g_w);
            opt.apply(1, &mut probe.bias, &g_b);
        }
    }
    Ok(probe)
}

pub fn evaluate_probe(
    probe: &LinearProbe,
    features: &[SparseVector],
    labels: &[usize],
) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty set"));
    }
    check_probe_inputs(features, labels)?;
    let correct = features
        .par_iter()
        .zip(labels)
        .map(|(x, &l)| Ok((probe.predict(x)? == l) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / features.len() as f64)
}

/// Which RBM representation a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeFeatures {
    Hidden,
    Gradient,
}

impl ProbeFeatures {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hidden" => Ok(ProbeFeatures::Hidden),
            "gradient" => Ok(ProbeFeatures::Gradient),
            other => Err(Error::validation(format!(
                "unknown probe features `{other}`"
            ))),
        }
    }
}

/// Hidden probabilities or normalized gradients of every image, in order.
pub fn rbm_features(
    rbm: &Rbm,
    images: &ImageSet,
    kind: ProbeFeatures,
) -> Result<Vec<SparseVector>> {
    (0..images.count())
        .into_par_iter()
        .map(|i| {
            let x = images.image(i);
            match kind {
                ProbeFeatures::Hidden => hidden_probabilities(rbm, x).map(|h| SparseVector {
                    dim: h.len(),
                    indices: (0..h.len() as u32).collect(),
                    values: h.into_iter().map(|v| v as f32).collect(),
                }),
                ProbeFeatures::Gradient => normalized_gradient_features(rbm, x),
            }
        })
        .collect()
}

/// Central finite difference of the free energy along parameter `k`.
pub fn free_energy_fd(rbm: &Rbm, x: &[f32], k: usize, delta: f64) -> Result<f64> {
    if k >= rbm.param_count() {
        return Err(Error::validation(format!("parameter {k} out of range")));
    }
    let mut plus = rbm.clone();
    *plus.param_mut(k) += delta;
    let mut minus = rbm.clone();
    *minus.param_mut(k) -= delta;
    Ok((free_energy(&plus, x)? - free_energy(&minus, x)?) / (2.0 * delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_rbm(nv: usize, nh: usize, seed_value: u64, scale: f64) -> Rbm {
        let mut rng = seed::rng_from_seed(seed_value);
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let (w, v, h) = (draw(nv * nh), draw(nv), draw(nh));
        Rbm::from_parts(nv, nh, w, v, h).unwrap()
    }

    fn random_input(n: usize, seed_value: u64) -> Vec<f32> {
        let mut rng = seed::rng_from_seed(seed_value);
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.4 {
                    0.0
                } else {
                    rng.random::<f32>()
                }
            })
            .collect()
    }

    /// `-log sum_h exp(b_v^T x + b_h^T h + x^T W h)` over all hidden states.
    fn enumerated_free_energy(rbm: &Rbm, x: &[f32]) -> f64 {
        let nh = rbm.n_hidden;
        let visible: f64 = rbm
            .visible_bias
            .iter()
            .zip(x)
            .map(|(b, &v)| b * v as f64)
            .sum();
        let energies: Vec<f64> = (0..1u32 << nh)
            .map(|state| {
                let mut e = visible;
                for j in 0..nh {
                    if state >> j & 1 == 1 {
                        e += rbm.hidden_bias[j];
                        for (i, &xi) in x.iter().enumerate() {
                            e += xi as f64 * rbm.weights[i * nh + j];
                        }
                    }
                }
                e
            })
            .collect();
        let m = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        -(m + energies.iter().map(|e| (e - m).exp()).sum::<f64>().ln())
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = rbm_init(784, 16, 3).unwrap();
        assert_eq!(a.param_count(), 13_344);
        assert_eq!(
            rbm_init(784, 64, 3).unwrap().param_count(),
            784 * 64 + 784 + 64
        );
        assert_eq!(a, rbm_init(784, 16, 3).unwrap());
        assert_ne!(a, rbm_init(784, 16, 4).unwrap());
        assert!(a
            .visible_bias
            .iter()
            .chain(&a.hidden_bias)
            .all(|&b| b == 0.0));
        let sd = (a.weights.iter().map(|w| w * w).sum::<f64>() / a.weights.len() as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.001, "{sd}");
        assert!(rbm_init(0, 16, 0).is_err());
        assert!(rbm_init(4, 0, 0).is_err());
    }

    #[test]
    fn closed_forms_at_zero() {
        let mut rbm = rbm_init(6, 4, 1).unwrap();
        let x = vec![0.0f32; 6];
        assert!((free_energy(&rbm, &x).unwrap() + 4.0 * 2f64.ln()).abs() < 1e-12);
        let g = rbm_gradient_features(&rbm, &x).unwrap();
        assert_eq!(g.len(), rbm.param_count());
        assert!(g[..30].iter().all(|&v| v == 0.0));
        assert!(g[30..].iter().all(|&v| (v + 0.5).abs() < 1e-12));

        // With W = 0, raising b_v^T x lowers F.
        rbm.weights.iter_mut().for_each(|w| *w = 0.0);
        let ones = vec![1.0f32; 6];
        let before = free_energy(&rbm, &ones).unwrap();
        rbm.visible_bias[2] = 0.7;
        assert!(free_energy(&rbm, &ones).unwrap() < before);
        assert!(free_energy(&rbm, &[0.0; 5]).is_err());
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rbm = random_rbm(12, 5, 2, 0.5);
        let x = random_input(12, 3);
        let g = rbm_gradient_features(&rbm, &x).unwrap();
        for (k, &gk) in g.iter().enumerate() {
            let fd = free_energy_fd(&rbm, &x, k, 1e-4).unwrap();
            let denom = gk.abs().max(fd.abs()).max(1e-8);
            assert!(
                (gk - fd).abs() / denom < 1e-4 || (gk - fd).abs() < 1e-9,
                "{k}"
            );
        }
    }

    #[test]
    fn normalized_features_match_dense_gradient() {
        let rbm = random_rbm(10, 3, 5, 0.3);
        let x = random_input(10, 8);
        let dense = rbm_gradient_features(&rbm, &x).unwrap();
        let norm = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sparse = normalized_gradient_features(&rbm, &x).unwrap().to_dense();
        for (a, b) in dense.iter().zip(&sparse) {
            assert!((a / norm - b).abs() < 1e-6);
        }
        assert!((sparse.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cd1_lr_zero_and_determinism() {
        let rbm = random_rbm(8, 3, 1, 0.2);
        let xs: Vec<Vec<f32>> = (0..5).map(|s| random_input(8, s)).collect();
        let batch: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        assert_eq!(cd1_update(&rbm, &batch, 0.0, 4).unwrap(), rbm);
        let a = cd1_update(&rbm, &batch, 0.1, 4).unwrap();
        assert_eq!(a, cd1_update(&rbm, &batch, 0.1, 4).unwrap());
        assert_ne!(a, rbm);
        assert!(cd1_update(&rbm, &[], 0.1, 4).is_err());
    }

    fn stripes(n: usize) -> ImageSet {
        // Two prototype patterns with a little noise.
        let mut rng = seed::rng_from_seed(9);
        let mut pixels = Vec::new();
        for k in 0..n {
            for j in 0..16 {
                let on = if k % 2 == 0 { j % 4 < 2 } else { j < 8 };
                let flip = rng.random::<f64>() < 0.05;
                pixels.push(if on != flip { 1.0 } else { 0.0 });
            }
        }
        ImageSet::new(4, 4, pixels).unwrap()
    }

    #[test]
    fn cd1_reduces_reconstruction_error() {
        let data = stripes(100);
        let mut rbm = rbm_init(16, 4, 1).unwrap();
        let before = reconstruction_error(&rbm, &data).unwrap();
        let mut rng = seed::rng_from_seed(2);
        for step in 0..200 {
            let batch: Vec<&[f32]> = (0..10).map(|k| data.image((step * 10 + k) % 100)).collect();
            cd1_step(&mut rbm, &batch, 0.1, &mut rng).unwrap();
        }
        assert!(reconstruction_error(&rbm, &data).unwrap() < before);
    }

    #[test]
    fn train_rbm_is_deterministic() {
        let data = stripes(40);
        let cfg = RbmTrainConfig {
            n_hidden: 3,
            epochs: 2,
            batch_size: 8,
            ..RbmTrainConfig::default()
        };
        let a = train_rbm(&data, &cfg).unwrap();
        assert_eq!(a, train_rbm(&data, &cfg).unwrap());
        assert_eq!(a.n_hidden(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let rbm = random_rbm(7, 3, 4, 1.0);
        let bytes = encode_rbm(&rbm);
        assert_eq!(decode_rbm(&bytes).unwrap(), rbm);
        assert!(matches!(
            decode_rbm(&bytes[..bytes.len() - 3]),
            Err(Error::Length { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_rbm(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn probe_separates_two_classes() {
        let mut rng = seed::rng_from_seed(5);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for k in 0..200 {
            let l = k % 2;
            let a: f64 = rng.random_range(0.2..1.0);
            let v = if l == 0 {
                vec![a, -a, 0.1]
            } else {
                vec![-a, a, 0.1]
            };
            feats.push(SparseVector::from_dense(&v));
            labels.push(l);
        }
        let cfg = SgdConfig {
            learning_rate: 0.5,
            epochs: 5,
            batch_size: 16,
            ..SgdConfig::default()
        };
        let probe = train_linear_probe(&feats, &labels, 2, &cfg).unwrap();
        assert_eq!(evaluate_probe(&probe, &feats, &labels).unwrap(), 1.0);

        let short = SparseVector::from_dense(&[1.0, 0.0]);
        assert!(probe.predict(&short).is_err());
        assert!(train_linear_probe(&[feats[0].clone(), short], &[0, 1], 2, &cfg).is_err());
        assert!(train_linear_probe(&feats[..2], &[0], 2, &cfg).is_err());
        assert!(train_linear_probe(&feats[..1], &[2], 2, &cfg).is_err());
    }

    #[test]
    fn probe_features_kinds() {
        let rbm = random_rbm(16, 3, 1, 0.3);
        let data = stripes(4);
        let h = rbm_features(&rbm, &data, ProbeFeatures::Hidden).unwrap();
        assert!(h.iter().all(|f| f.dim == 3 && f.nnz() == 3));
        let g = rbm_features(&rbm, &data, ProbeFeatures::Gradient).unwrap();
        assert!(g.iter().all(|f| f.dim == rbm.param_count()));
        assert_eq!(
            ProbeFeatures::parse("Gradient").unwrap(),
            ProbeFeatures::Gradient
        );
        assert!(ProbeFeatures::parse("latent").is_err());
    }

    proptest! {
        #[test]
        fn free_energy_matches_enumeration(seed_value in any::<u64>(), nh in 1usize..=10) {
            let rbm = random_rbm(6, nh, seed_value, 1.0);
            let x = random_input(6, seed_value ^ 7);
            let f = free_energy(&rbm, &x).unwrap();
            prop_assert!((f - enumerated_free_energy(&rbm, &x)).abs() < 1e-8);
        }
    }
}
