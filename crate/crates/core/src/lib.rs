//! Webly-supervised training with a self-organizing key/value memory.
//!
//! Bags of ROI features (whole images plus their region proposals) are
//! reweighted by a memory module that clusters bag-level features and keeps,
//! for every cluster, how discriminative and how representative it is for
//! each category. Only the ROIs whose clusters are prototypical for the bag
//! label keep weight, and the kept fraction grows over a curriculum.
//!
//! Module map:
//!
//! - [`data`]: instances, bags, JSONL ingestion, synthetic noisy datasets.
//! - [`memory`]: key slots on a square grid with d-value and r-value slots.
//! - [`model`]: optional tanh encoder and softmax classifier with exact gradients.
//! - [`trainer`]: warm-up, ROI weight refresh, curriculum training, prediction.
//! - [`eval`]: metrics, baselines and the ablation suite.
//! - [`heatmap`]: ROI-weight rasters over proposal boxes.
//! - [`cli`]: the commands behind the `somnet` binary.

// `!(x > eps)` is used on purpose so NaN takes the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
mod kmeans;
mod linalg;
pub mod memory;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
