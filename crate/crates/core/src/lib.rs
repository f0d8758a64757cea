//! Algorithmic core for source-free adaptation of binary lesion segmenters.
//!
//! Everything in this crate is pure computation over in-memory arrays: no IO,
//! no threads, no global state. The companion `sfda-pipeline` crate supplies
//! neural networks, file formats and the CLI on top of these primitives.
//!
//! The crate is `no_std` (with `alloc`) so the numeric kernels can be reused
//! from constrained hosts; float intrinsics come from [`libm`].

#![no_std]
#![forbid(unsafe_code)]
// Validation deliberately writes `!(v > bound)` so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod domain;
pub mod edges;
pub mod error;
pub mod evidential;
pub mod grid;
pub mod metrics;
pub mod schedule;
pub mod seed;
pub mod selector;
pub mod synth;

pub use domain::{
    ApproximationResult, BinaryMask, Chosen, EdgeMap, Generation, Image2D, NIGField,
    UncertaintyMap, Validate, ValidationReport,
};
pub use error::Error;
pub use grid::Grid2;

/// Crate-wide result alias.
pub type Result<T, E = Error> = core::result::Result<T, E>;
