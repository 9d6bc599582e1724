//! Per-sample gradient features.
//!
//! A gradient of the base network is grouped into one block per base layer,
//! sparsified block by block (keeping the entries of largest magnitude), and
//! then normalized over the values that survived.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_model::{loss_and_gradient, BaseModel};
use crate::data_io::Dataset;
use crate::error::{Error, Result};

/// Dense per-layer gradient `grad_theta l(x; label_used, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredGradient {
    /// One block per base layer: weights row-major, then biases.
    pub blocks: Vec<Vec<f64>>,
    pub label_used: usize,
}

impl LayeredGradient {
    pub fn layout(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= factor);
        self
    }
}

pub fn extract_gradient(model: &BaseModel, x: &[f32], label: usize) -> Result<LayeredGradient> {
    let (_, grad) = loss_and_gradient(model, x, label)?;
    Ok(LayeredGradient {
        blocks: grad.blocks,
        label_used: label,
    })
}

/// The kept entries of one block, sorted by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlock {
    /// Length of the dense block this was taken from.
    pub len: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseBlock {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .map(|&i| i as usize)
            .zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub blocks: Vec<SparseBlock>,
}

impl SparseGradient {
    pub fn layout(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len).collect()
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(SparseBlock::nnz).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(SparseBlock::to_dense).collect()
    }

    /// All kept values, block after block.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(|b| b.values.iter().copied())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(|b| b.values.iter_mut())
    }
}

fn check_percentile(q: f64) -> Result<()> {
    if !(0.0..100.0).contains(&q) {
        return Err(Error::validation(format!(
            "percentile {q} outside [0, 100)"
        )));
    }
    Ok(())
}

/// Entries kept from a block of length `len` at percentile `q`:
/// `len - ceil(q / 100 * len)`.
pub fn keep_count(q: f64, len: usize) -> usize {
    let dropped = (q * len as f64 / 100.0).ceil() as usize;
    len - dropped.min(len)
}

/// Keeps the `keep` entries of largest magnitude, lower index first among equals.
fn top_magnitudes(block: &[f64], keep: usize) -> SparseBlock {
    let len = block.len();
    if keep == len {
        return SparseBlock {
            len,
            indices: (0..len as u32).collect(),
            values: block.to_vec(),
        };
    }
    let mut indices = Vec::with_capacity(keep);
    let mut values = Vec::with_capacity(keep);
    let nonzero = block.iter().filter(|&&v| v != 0.0).count();
    if nonzero <= keep {
        // Every nonzero survives; the remaining slots go to the first zeros.
        let mut zeros = keep - nonzero;
        for (i, &v) in block.iter().enumerate() {
            if v != 0.0 || zeros > 0 {
                if v == 0.0 {
                    zeros -= 1;
                }
                indices.push(i as u32);
                values.push(v);
            }
        }
    } else if keep > 0 {
        let mut mags: Vec<f64> = block
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|v| v.abs())
            .collect();
        let (_, &mut threshold, _) = mags.select_nth_unstable_by(keep - 1, |a, b| b.total_cmp(a));
        let above = block.iter().filter(|v| v.abs() > threshold).count();
        let mut ties = keep - above;
        for (i, &v) in block.iter().enumerate() {
            let m = v.abs();
            if m > threshold || (m == threshold && ties > 0) {
                if m == threshold {
                    ties -= 1;
                }
                indices.push(i as u32);
                values.push(v);
            }
        }
    }
    SparseBlock {
        len,
        indices,
        values,
    }
}

/// Layer-by-layer sparsification: every block independently keeps the
/// [`keep_count`] entries of largest absolute value, with their signs.
pub fn sparsify_percentile(grad: &LayeredGradient, q: f64) -> Result<SparseGradient> {
    check_percentile(q)?;
    Ok(SparseGradient {
        blocks: grad
            .blocks
            .iter()
            .map(|b| top_magnitudes(b, keep_count(q, b.len())))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormStep {
    /// `(v - mean) / std` over the kept values (population std; zero std maps to 0).
    Standard,
    /// `v / ||v||_2`.
    L2,
    /// `v / max |v_i|`.
    Scale,
    /// `sign(v) |v|^p`.
    Power(f64),
}

/// An ordered chain of normalization steps, e.g. `scale,power:0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationSpec {
    chain: Vec<NormStep>,
}

impl NormalizationSpec {
    pub fn new(chain: Vec<NormStep>) -> Result<Self> {
        if chain.is_empty() {
            return Err(Error::validation("normalization chain must not be empty"));
        }
        for step in &chain {
            if let NormStep::Power(p) = step {
                if !(p.is_finite() && *p > 0.0) {
                    return Err(Error::validation(format!(
                        "power exponent {p} must be positive"
                    )));
                }
            }
        }
        Ok(NormalizationSpec { chain })
    }

    /// Scale norm followed by the signed square root.
    pub fn scale_sqrt() -> Self {
        NormalizationSpec {
            chain: vec![NormStep::Scale, NormStep::Power(0.5)],
        }
    }

    pub fn steps(&self) -> &[NormStep] {
        &self.chain
    }
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::scale_sqrt()
    }
}

impl fmt::Display for NormalizationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.chain.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match step {
                NormStep::Standard => f.write_str("standard")?,
                NormStep::L2 => f.write_str("l2")?,
                NormStep::Scale => f.write_str("scale")?,
                NormStep::Power(p) => write!(f, "power:{p}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for NormalizationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chain = s
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                match tok {
                    "standard" => Ok(NormStep::Standard),
                    "l2" => Ok(NormStep::L2),
                    "scale" => Ok(NormStep::Scale),
                    _ => {
                        let p = tok.strip_prefix("power:").ok_or_else(|| {
                            Error::validation(format!("unknown norm step `{tok}`"))
                        })?;
                        parse_exponent(p).map(NormStep::Power)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        NormalizationSpec::new(chain)
    }
}

/// Accepts decimals (`0.5`) and fractions (`1/8`).
fn parse_exponent(s: &str) -> Result<f64> {
    let bad = || Error::validation(format!("bad power exponent `{s}`"));
    match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            Ok(n / d)
        }
        None => s.trim().parse().map_err(|_| bad()),
    }
}

impl Serialize for NormalizationSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NormalizationSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn apply_step(sg: &mut SparseGradient, step: NormStep) {
    let n = sg.nnz();
    match step {
        NormStep::Standard => {
            if n == 0 {
                return;
            }
            let mean = sg.values().sum::<f64>() / n as f64;
            let var = sg.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            for v in sg.values_mut() {
                *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
            }
        }
        NormStep::L2 => {
            let norm = sg.values().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                sg.values_mut().for_each(|v| *v /= norm);
            }
        }
        NormStep::Scale => {
            let max = sg.values().fold(0.0f64, |m, v| m.max(v.abs()));
            if max > 0.0 {
                sg.values_mut().for_each(|v| *v /= max);
            }
        }
        NormStep::Power(p) => {
            for v in sg.values_mut() {
                let m = if p == 0.5 {
                    v.abs().sqrt()
                } else {
                    v.abs().powf(p)
                };
                *v = v.signum() * m;
                if *v == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Applies the chain to the concatenation of all kept values. Indices are untouched.
pub fn normalize(sg: &SparseGradient, spec: &NormalizationSpec) -> SparseGradient {
    let mut out = sg.clone();
    for &step in &spec.chain {
        apply_step(&mut out, step);
    }
    out
}

/// Per-label index masks over the base parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMasks {
    /// `masks[label][block]`: sorted kept indices of that block.
    masks: Vec<Vec<Vec<u32>>>,
}

impl LabelMasks {
    pub fn n_labels(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, label: usize) -> &[Vec<u32>] {
        &self.masks[label]
    }

    /// Number of indices in the mask of `label`, over all blocks.
    pub fn mask_len(&self, label: usize) -> usize {
        self.masks[label].iter().map(Vec::len).sum()
    }

    /// Keeps only the entries of `sg` whose index lies in the mask of `label`.
    pub fn restrict(&self, label: usize, sg: &SparseGradient) -> SparseGradient {
        let blocks = sg
            .blocks
            .iter()
            .zip(&self.masks[label])
            .map(|(block, mask)| {
                let mut out = SparseBlock {
                    len: block.len,
                    indices: Vec::new(),
                    values: Vec::new(),
                };
                let mut m = mask.iter().peekable();
                for (&i, &v) in block.indices.iter().zip(&block.values) {
                    while m.next_if(|&&k| k < i).is_some() {}
                    if m.peek() == Some(&&i) {
                        out.indices.push(i);
                        out.values.push(v);
                    }
                }
                out
            })
            .collect();
        SparseGradient { blocks }
    }
}

/// For each class `c`, the indices of the `ceil(top_fraction * n)` coordinates
/// with the largest mean absolute gradient over the samples of class `c`
/// (gradients taken at the true label).
pub fn compute_label_masks(
    model: &BaseModel,
    data: &Dataset,
    top_fraction: f64,
) -> Result<LabelMasks> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::validation(format!(
            "mask fraction {top_fraction} outside (0, 1]"
        )));
    }
    let n_classes = model.n_classes();
    data.labels.validate(n_classes)?;
    let layout = model.block_lengths();
    let n: usize = layout.iter().sum();
    let keep = ((top_fraction * n as f64).ceil() as usize).min(n);

    let mut masks = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let members: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels.get(i) == class)
            .collect();
        if members.is_empty() {
            return Err(Error::validation(format!("class {class} has no samples")));
        }
        let grads = members
            .par_iter()
            .map(|&i| extract_gradient(model, data.images.image(i), class).map(|g| g.flatten()))
            .collect::<Result<Vec<_>>>()?;
        let mut mean = vec![0.0; n];
        for g in &grads {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v.abs();
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        let top = top_magnitudes(&mean, keep);
        let mut per_block = vec![Vec::new(); layout.len()];
        let mut starts = Vec::with_capacity(layout.len());
        let mut acc = 0;
        for &len in &layout {
            starts.push(acc);
            acc += len;
        }
        for &flat in &top.indices {
            let b = starts.partition_point(|&s| s <= flat as usize) - 1;
            per_block[b].push(flat - starts[b] as u32);
        }
        masks.push(per_block);
    }
    Ok(LabelMasks { masks })
}

/// Feature-pipeline settings shared by training and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub percentile: f64,
    pub norm: NormalizationSpec,
    /// Applied between sparsification and normalization, keyed by the candidate label.
    pub label_masks: Option<LabelMasks>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            percentile: 85.0,
            norm: NormalizationSpec::scale_sqrt(),
            label_masks: None,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        check_percentile(self.percentile)
    }

    /// Sparsify, optionally mask, then normalize an already extracted gradient.
    pub fn transform(&self, grad: &LayeredGradient) -> Result<SparseGradient> {
        let mut sg = sparsify_percentile(grad, self.percentile)?;
        if let Some(masks) = &self.label_masks {
            sg = masks.restrict(grad.label_used, &sg);
        }
        Ok(normalize(&sg, &self.norm))
    }

    /// The full pipeline for sample `x` under candidate label `candidate`.
    pub fn features(
        &self,
        model: &BaseModel,
        x: &[f32],
        candidate: usize,
    ) -> Result<SparseGradient> {
        self.transform(&extract_gradient(model, x, candidate)?)
    }
}
