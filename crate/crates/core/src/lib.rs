//! Post-hoc suppression of artifact directions in the latent space of dense
//! networks, applied conditionally per sample.
//!
//! The pipeline: estimate concept activation vectors (CAVs) for known data
//! artifacts ([`concepts`]), project activations onto the subspace orthogonal
//! to those directions anchored at a clean reference point ([`clarc`]), and
//! fire the correction only for samples that trip a class or artifact-probe
//! condition. [`synthdata`] generates the controlled datasets, [`attribution`]
//! measures how much credit the corrected model still assigns to artifact
//! coordinates, and [`harness`] ties everything into reproducible experiments
//! behind the `rclarc` CLI.
//!
//! All randomness flows through the crate-local [`rng::SplitMix64`] stream so
//! that every result is bit-reproducible from a `u64` seed, on any platform.

pub mod attribution;
pub mod clarc;
pub mod concepts;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod svm;
pub mod synthdata;

pub use linalg::{Matrix, Vector};
pub use nn::MlpModel;
