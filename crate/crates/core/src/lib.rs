//! Point-cloud auto-encoder with hierarchical self-attention and
//! local-to-global reconstruction.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`geometry`] - deterministic point-set kernels: normalization, farthest
//!   point sampling, multi-scale kNN grouping, Chamfer distance, and
//!   area-weighted mesh surface sampling.
//! * [`autodiff`] - a minimal reverse-mode tape over dense `f64` matrices,
//!   with exactly the primitives the network needs (affine maps, column
//!   softmax, max pooling, an LSTM cell, Chamfer loss).
//! * [`encoder`] / [`decoder`] - the network itself: point/scale/region
//!   attention blocks with MLP + max-pool aggregation on the way up,
//!   interpolation + recurrent scale decoding + FC reconstruction on the
//!   way down.
//! * [`training`] - joint local/global Chamfer loss, Adam, and the
//!   mini-batch loop with learning-rate decay and checkpointing.
//! * [`eval`] - downstream tasks on frozen features: linear-SVM
//!   classification, retrieval (mAP + PR curves), unsupervised upsampling,
//!   and attention summaries.
//! * [`dataset`] / [`fixtures`] - manifest-driven ingestion into a binary
//!   dataset container, plus a synthetic corpus generator so everything runs
//!   without external downloads.
//!
//! All randomness flows from explicit seeds and every kernel is
//! deterministic, including the rayon-parallel paths: parallel maps collect
//! per-item results and combine them in index order, so sequential and
//! parallel runs produce bitwise-identical output.

pub mod autodiff;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod geometry;
pub mod model;
pub mod parallel;
pub mod training;

pub use error::{Error, Result};
