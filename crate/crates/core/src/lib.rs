//! Federated unsupervised representation learning with soft client separation
//! and projector distillation.
//!
//! This crate is `no_std` (it needs `alloc`) and holds every piece of the
//! simulator that is pure computation: dense numerics, the encoder/projector
//! MLPs, the four training losses with closed-form gradients, synthetic data
//! and non-IID partitioning, the federated training loop, and the
//! representation-quality metrics. File formats and the command line live in
//! the `fedssd` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
mod error;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
