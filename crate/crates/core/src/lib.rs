//! Membership inference susceptibility analysis.
//!
//! The crate is split along the pipeline:
//!
//! - [`data`]: synthetic blobs, CSV ingestion, stratified membership splits.
//! - [`nn`]: a small feedforward classifier trained with plain SGD.
//! - [`knn`]: exact k-nearest-neighbour radii (kd-tree with brute-force fallback).
//! - [`infotheory`]: kNN entropy and mutual information estimators.
//! - [`bound`]: the Fano-style lower bound on the probability that a
//!   membership attack makes more than `alpha` errors, plus a channel simulator.
//! - [`mia`]: shadow-model membership inference attacks.
//! - [`experiment`]: MI-vs-attack correlation sweeps and bound validation grids.

pub mod bound;
pub mod data;
pub mod error;
pub mod experiment;
pub mod infotheory;
pub mod knn;
pub mod mia;
pub mod nn;
pub mod rng;
pub mod units;

pub use error::{Error, Result};
pub use units::LogBase;
