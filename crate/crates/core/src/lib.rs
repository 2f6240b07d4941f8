//! Random walks and random-walk bridges on Galton-Watson trees.
//!
//! The crate samples depth-capped Galton-Watson trees, runs simple and
//! biased random walks on them, computes exact quenched bridge
//! probabilities by dynamic programming, and checks the results against
//! closed-form and exhaustive oracles.
//!
//! Module map:
//! - [`offspring`]: offspring laws, generating functions, extinction and the dual law.
//! - [`tree`]: tree arena, samplers, backbone/bush marks, trap statistics.
//! - [`oracles`]: exact walk-on-Z computations and hitting-time moments on small trees.
//! - [`walk`]: walk kernels, path sampling, couplings, escape probabilities, path observables.
//! - [`bridge`]: forward occupancy DP, kill-mode profiles and exact bridge sampling.
//! - [`measure`]: the SRW/BRW path-density ratio and its sandwich bounds.
//! - [`experiments`]: configured experiments, CSV records and the verification suite.

#![forbid(unsafe_code)]

pub mod bridge;
pub mod exact;
pub mod experiments;
pub mod measure;
pub mod offspring;
pub mod oracles;
pub mod rng;
pub mod tree;
pub mod walk;
