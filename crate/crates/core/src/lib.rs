//! Grid-based page text recognition without the network: decoding of
//! per-grid prediction maps into reading-order lines, weakly supervised
//! pseudo-labeling from line transcripts, training losses as diagnostics,
//! and page-level evaluation.
//!
//! Grid coordinates are 1-based `(i, j)` = (column, row). Line and character
//! indices (`p`, `m`, `q`, `n`) are 0-based.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod decoder;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod predictions;
pub mod pseudolabels;
mod scalar;
pub mod simloop;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BBox32 = geometry::BBox<f32>;
pub type BBox64 = geometry::BBox<f64>;
pub type PredictionMaps32 = predictions::PredictionMaps<f32>;
pub type PredictionMaps64 = predictions::PredictionMaps<f64>;
pub type PageResult32 = decoder::PageResult<f32>;
pub type PageResult64 = decoder::PageResult<f64>;
pub type PseudoLabelStore64 = pseudolabels::PseudoLabelStore<f64>;
