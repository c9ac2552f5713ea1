//! Exactly solvable model of transfer learning with a pretrained linear
//! representation.
//!
//! The library covers the full pipeline:
//!
//! - [`model`]: problem instances and the random generators behind every
//!   experiment (covariances, ground-truth representations, task priors,
//!   datasets).
//! - [`penalty`]: the generalized-ridge operator induced by a representation
//!   and its shrink profile.
//! - [`predictor`]: the closed-form ridgeless predictor, its limiting
//!   variants, and empirical risk.
//! - [`asymptotics`]: exact asymptotic risk, its fine-grained bias-variance
//!   components, and the prior-averaged / worst-case pretraining objectives.
//! - [`montecarlo`]: simulation estimators for the risk and both
//!   bias-variance decompositions, with label noise integrated analytically.
//! - [`spectrum_opt`]: closed-form and convex(-relaxed) optimization of the
//!   penalty spectrum in the aligned-eigenvector case.
//! - [`full_opt`]: gradient-based optimization of the full representation,
//!   with implicit differentiation through the risk fixed point.
//! - [`upstream`]: per-task OLS estimation of the ground-truth representation
//!   and its sample-complexity experiment.
//!
//! The crate is `no_std`-compatible (with `alloc`); all IO, parallelism and
//! file formats live in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod asymptotics;
pub mod error;
pub mod full_opt;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod penalty;
pub mod predictor;
pub mod rng;
pub mod spectrum_opt;
pub mod upstream;

pub use error::{Error, Result};
