//! Semantic fMRI-to-image decoding at desk scale.
//!
//! The crate covers the whole chain: a synthetic brain/stimulus world
//! ([`synthdata`]), grounded multi-granularity caption synthesis
//! ([`mimevis`]), a small autodiff engine ([`nncore`]), the training
//! objectives ([`losses`]), the four-stage encoder stack ([`pipeline`]), a
//! pluggable image renderer ([`renderer`]) and the evaluation battery
//! ([`metrics`]).

pub mod error;
pub mod format;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod mimevis;
pub mod nncore;
pub mod pipeline;
pub mod renderer;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
