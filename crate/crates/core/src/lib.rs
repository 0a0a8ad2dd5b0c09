//! Latent factor analysis via dynamical systems, allocation-only core.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! a reverse-mode differentiation tape, GRU building blocks, the sequential
//! VAE (encoders, controller, generator, readouts), its evidence lower bound,
//! the Adam optimizer, the synthetic spike-train benchmarks and the
//! evaluation maths. File formats, threading and the command line live in
//! the `lfads-forge` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cells;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{LfadsConfig, ModelParams};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
