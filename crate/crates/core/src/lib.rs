//! Meta-learned graph neural operators for physics simulation.
//!
//! A context encoder summarizes a few observed trials of a task into a latent
//! `r`; a decoder conditioned on `r` predicts every frame of a new trial in one
//! pass. The crate ships its own tape-based autodiff, a mass-spring
//! meta-dataset generator, baselines, training and evaluation.

pub mod baselines;
mod binio;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod trial;

pub use error::{Error, Result};
