//! Concept-sensitivity discovery and concept-aware mixup for a planted
//! Gaussian-mixture classification problem.
//!
//! The crate is `no_std` with `alloc`; file formats, threads and the command
//! line live in `disc-lab`.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod conceptbank;
pub mod cure;
pub mod discovery;
pub mod envcluster;
pub mod error;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
