//! Per-sample gradient features for classification.
//!
//! A weakly trained base network describes each input through the gradient
//! of its loss under a candidate label. This crate extracts those gradients
//! block by block, sparsifies and normalizes them, and trains a shallow
//! block-structured classifier ([`gradnet`]) on them. Prediction sums the
//! classifier's output over every candidate label.
//!
//! Modules, bottom to top:
//!
//! - [`data_io`]: IDX files, splits, augmentation, sparse feature records.
//! - [`base_model`]: the MLP, per-sample backprop, threshold snapshots.
//! - [`features`]: per-block percentile sparsification and normalization chains.
//! - [`metric`]: gradient-space metric, tangent kernel, Gram matrices.
//! - [`gradnet`]: the block-structured classifier and its training loop.
//! - [`rbm`]: free-energy gradient features of a CD-1 trained RBM, linear probes.
//! - [`harness`]: TOML experiment configs, end-to-end runs, reports.
//!
//! All randomness flows from one root seed through [`seed::derive_seed`], so
//! runs are reproducible bit for bit.
//!
//! ```
//! use gradfeat::base_model::mlp_init;
//! use gradfeat::features::FeatureConfig;
//! use gradfeat::gradnet::{gradnet_init, predict, BlockSpec};
//!
//! let base = mlp_init(&[16, 8, 4], 0).unwrap();
//! let spec = BlockSpec::adjacent(&[3, 3], 2).unwrap();
//! let net = gradnet_init(&spec, &base.block_lengths(), 4, 1).unwrap();
//! let class = predict(&base, &net, &[0.5; 16], &FeatureConfig::default()).unwrap();
//! assert!(class < 4);
//! ```

pub mod base_model;
pub mod data_io;
pub mod error;
pub mod features;
pub mod gradnet;
pub mod harness;
pub mod metric;
pub mod optim;
pub mod rbm;
pub mod seed;

pub use error::{Error, Result};
