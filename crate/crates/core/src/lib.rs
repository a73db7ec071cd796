//! Reversible flow-matching toolkit: pretrain a continuous-time velocity
//! field as a generative flow, run the learned ODE backward as a feature
//! extractor, and fine-tune it jointly with a classifier head.
//!
//! The crate is `no_std` + `alloc`; float math goes through `libm` and all
//! randomness flows from seeded [`rng::Rng`] streams, so every run is
//! bit-reproducible. File formats, CLI, and wall-clock live in the companion
//! `revflow-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod coupling;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod likelihood;
pub mod metrics;
pub mod net;
pub mod odeint;
pub mod optim;
pub mod paths;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
