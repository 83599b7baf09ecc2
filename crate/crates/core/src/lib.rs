//! Monte Carlo simulator of an atomic clock whose local oscillator is locked
//! to a cascade of atomic ensembles operated with geometrically increasing
//! Ramsey times.
//!
//! The crate is organized around the lifecycle of a simulated run:
//! [`noise`] synthesizes the unlocked oscillator's phase increments,
//! [`ensemble`] performs single Ramsey interrogations (projective or adaptive
//! Bayesian), [`cascade`] runs the full multi-ensemble feedback loop with its
//! measurement-time and end-of-run phase corrections, [`analysis`] aggregates
//! trials into stability numbers, spectra and break-down scans, and
//! [`experiment`] handles configuration, seeded parallel execution and file
//! output for the `cascade-clock` binary.

pub mod analysis;
pub mod cascade;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod noise;
pub mod posterior;
pub mod rng;
pub mod spectrum;

pub use error::{ClockError, Result};
