//! Each chapter of the guide is a module here, so `cargo test --doc`
//! runs every Rust listing in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/base-model.md")]
pub mod base_model {}
#[doc = include_str!("../../../book/src/features.md")]
pub mod features {}
#[doc = include_str!("../../../book/src/metric.md")]
pub mod metric {}
#[doc = include_str!("../../../book/src/gradnet.md")]
pub mod gradnet {}
#[doc = include_str!("../../../book/src/rbm.md")]
pub mod rbm {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
