//! Simulation core for class-imbalanced federated source-free domain adaptation.
//!
//! Everything in this crate is a pure function of its inputs and seeds: feature
//! datasets and their binary encoding, the source/target partitioning protocol,
//! the trainable head that sits on top of a frozen feature extractor, the client
//! objectives, the federated round loop and the evaluation/cost accounting.
//!
//! The crate is `no_std` and only needs `alloc`. File IO, parallel client
//! execution, configuration and the command-line front end live in the
//! companion `ciffreeda` crate.
#![no_std]
#![warn(missing_debug_implementations)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod costs;
pub mod dataset;
mod error;
pub mod federation;
pub mod fedf;
pub mod head;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod partition;
pub mod rng;
pub mod source;
pub mod synth;

pub use dataset::{FeatureDataset, GuardedDataset};
pub use error::{Error, Result};
pub use head::{ClassifierMode, HeadGrads, HeadParams, OptimizerState};
pub use math::Matrix;
