//! First-order optimizers over flat `f32` parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Parses `sgd` or `adam` (with the usual default moments).
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::adam()),
            other => Err(Error::validation(format!("unknown optimizer `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Per-tensor optimizer state. SGD keeps nothing.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    /// `shapes` gives the length of each parameter tensor the optimizer will update.
    pub fn new(kind: OptimizerKind, learning_rate: f64, shapes: &[usize]) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam { .. } => shapes
                .iter()
                .map(|&n| (vec![0.0; n], vec![0.0; n]))
                .collect(),
        };
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            moments,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Marks the start of a new update; must be called once before the
    /// `apply` calls of that update.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to tensor `slot` given its (already averaged) gradient.
    pub fn apply(&mut self, slot: usize, params: &mut [f32], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p = (*p as f64 - lr * g) as f32;
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = &mut self.moments[slot];
                for i in 0..params.len() {
                    let g = grad[i];
                    let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
                    let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let update = lr * (mi / c1) / ((vi / c2).sqrt() + epsilon);
                    params[i] = (params[i] as f64 - update) as f32;
                }
            }
        }
    }
}
