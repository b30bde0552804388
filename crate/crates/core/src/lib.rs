//! Desk-scale laboratory for activation-compressed training.
//!
//! Training a network normally keeps every tensor saved for the backward pass
//! ("context") in memory at full precision. This crate stores that context
//! through an unbiased per-group stochastic-rounding quantizer instead, and
//! provides the machinery to do so safely:
//!
//! - [`numerics`]: dense tensors, a counter-based RNG with replayable streams,
//!   and the binary tensor format.
//! - [`quantizer`]: the bit-packed per-group codec and its analytic variance
//!   bound.
//! - [`tape`]: a minimal reverse-mode autodiff engine whose saved context
//!   flows through a [`tape::ContextStore`], with optional segment
//!   checkpointing.
//! - [`sensitivity`]: per-slot gradient-variance sensitivity estimation by
//!   controlled re-seeding of one compressor stream, plus a brute-force
//!   Monte Carlo oracle.
//! - [`allocator`]: greedy minimum-variance bit allocation under a total bit
//!   budget, with an exhaustive oracle for small instances.
//! - [`trainer`]: the SGD loop with compressed context, periodic sensitivity
//!   refresh and re-allocation, and a compression-noise alert.
//! - [`theorycheck`]: empirical verification of the linearized-gradient
//!   variance theory in double precision.
//! - [`verify`]: pinned-seed pass/fail suites used by the CLI.

pub mod allocator;
pub mod error;
pub mod numerics;
pub mod quantizer;
pub mod sensitivity;
pub mod tape;
pub mod theorycheck;
pub mod trainer;
pub mod verify;

pub use error::{ActError, Result};
