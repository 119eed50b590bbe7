//! Relational proxy losses for audio–text keyword embeddings.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece of the
//! system: embedding primitives, point-to-point and structure-to-structure
//! losses with analytic gradients, a finite-difference gradient checker, a
//! synthetic keyword corpus with toy encoders, the optimizer and training
//! state machine, and EER/AP evaluation. File formats, configuration parsing
//! and the command line live in the `relprox` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod train;

pub use embedding::{LabeledEmbeddingBatch, TupleEnumeration, TupleSampling};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use losses::{CombinedLossConfig, LossOutput};

/// Guard applied to every norm division.
pub const EPS: f64 = 1e-12;
