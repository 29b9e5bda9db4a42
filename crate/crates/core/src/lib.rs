//! Bulk and spot gene expression prediction from cell-level slide features.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tape`]) over dense f64 tensors ([`tensor`]). Model components
//! (graph attention, transformer context, gene-query pooling) compose on
//! the tape; preprocessing, evaluation, and the synthetic-data generator
//! are plain tensor code.

pub mod adam;
pub mod cli;
pub mod cluster;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod lora;
pub mod mil;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod stain;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod synth;

pub use error::{Error, Result};
pub use tensor::Tensor;
