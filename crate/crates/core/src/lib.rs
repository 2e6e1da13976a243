#![cfg_attr(not(test), no_std)]
//! Allocation-only core of `choreo`: a music-conditioned dance generator.
//!
//! A windowed self-attention encoder turns per-frame music features into a
//! latent sequence; an LSTM decoder rolls poses out autoregressively, one
//! latent row per frame. Training alternates predicted and ground-truth
//! inputs in blocks whose predicted length grows with the epoch count.
//!
//! Nothing in this crate touches the filesystem or a clock. File formats,
//! checkpoints and the command line live in the `choreo` crate.

extern crate alloc;

pub mod adam;
pub mod attention;
pub mod curriculum;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;
