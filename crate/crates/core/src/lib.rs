//! Modified S-transform time-frequency features and a compact dual-encoder
//! convolutional classifier for multi-channel cortical recordings, with
//! occlusion-based importance experiments and a planted-truth synthetic
//! data generator.
//!
//! Pipeline: [`signal`] normalizes trials against their background segment,
//! [`mst`] maps each channel to a complex frequency x time plane,
//! [`spectral`] holds transformed datasets and assembles batches,
//! [`network`] and [`trainer`] fit the classifier under stratified k-fold
//! cross-validation, and [`importance`] runs the masking experiments.

// `!(x > 0.0)` is deliberate: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod cli;
pub mod error;
pub mod importance;
pub mod mst;
pub mod network;
pub mod signal;
pub mod spectral;
pub mod syndata;
pub mod trainer;

pub use error::{Error, Result};
