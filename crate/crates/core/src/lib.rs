//! Illuminant color estimation with feature-map reweight units.
//!
//! The crate is `no_std` and only needs `alloc`. It contains everything that
//! is pure computation:
//!
//! - [`tensor`] and [`tape`]: a dense `f64` tensor and a small reverse-mode
//!   differentiation tape with the operation set the networks need.
//! - [`rewu`]: the reweight unit, channel normalization, threshold
//!   initialization and the closed-form achromatic-region mask.
//! - [`network`]: the 1/2/3-hierarchy estimation networks with an optional
//!   confidence branch.
//! - [`trainer`]: losses, the budgeted lambda schedule, Nadam and the
//!   two-phase training loops.
//! - [`colorlib`]: von Kries model, angular error, CIE 1960 UCS chromaticity,
//!   classical baselines and summary statistics.
//! - [`datagen`]: synthetic Mondrian scenes, augmentation and grid sampling.
//! - [`aggregator`]: turning per-patch estimates into a global estimate.
//! - [`gradcheck`]: finite-difference verification of tape gradients.
//!
//! File formats, the command line and anything touching the filesystem live
//! in the `reweight-cli` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod aggregator;
pub mod colorlib;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod rewu;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
