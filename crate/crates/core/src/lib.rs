//! Fault-tolerance workbench for small CNN classifiers.
//!
//! The crate covers the full loop: build and train a model
//! ([`model`], [`train`]), measure per-channel vulnerability to parameter
//! bit flips ([`vuln`]), profile value intervals and attach range-checking
//! duplication or triplication to the most fragile channels ([`profile`],
//! [`harden`]), bombard the parameters with random bit flips to measure the
//! effect ([`inject`]), and prune low-importance channels to pay for the
//! hardening overhead ([`prune`]).
//!
//! Determinism is a design rule: every randomized routine takes an explicit
//! seed, and results are bit-identical across runs and across worker-thread
//! counts.

pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod harden;
pub mod inject;
pub mod io;
pub mod layer;
pub mod model;
pub mod profile;
pub mod prune;
pub mod tensor;
pub mod train;
pub mod vuln;

pub use error::{Error, Result};
