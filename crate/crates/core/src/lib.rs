//! Video instance lane detection at desk scale.
//!
//! The crate covers the full pipeline: point-based lane annotations are fit
//! with cubic polynomials and rasterized into fixed-width instance masks
//! (`annotation`), deterministic synthetic lane videos and memory-frame
//! selection live in `dataset`, the memory-aggregation detector itself in
//! `network`, the two-stage trainer in `training`, and the image- and
//! video-level metric suite in `metrics`. Everything runs on CPU with `f64`
//! math; `tensor` is the small reverse-mode autodiff engine underneath.

pub mod annotation;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
