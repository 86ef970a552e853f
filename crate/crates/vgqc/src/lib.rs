//! Visual grounding on synthetic scenes with query-conditioned convolutions.
//!
//! The crate is self-contained: a reverse-mode autodiff tape ([`tensor`]),
//! a small convolutional backbone whose kernels can be generated per query,
//! transformer-style encoders for text and image tokens, box losses, a
//! deterministic synthetic-scene generator, and the training/eval/analysis
//! drivers behind the `vgqc` binary.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod qcm;
pub mod tensor;
pub mod text;
pub mod train;
pub mod visual;

pub use error::{Result, VgqcError};
