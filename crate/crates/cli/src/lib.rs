//! Config-driven experiment harness over the transfer-risk library.
//!
//! Exposed as a library so integration tests can drive the runners directly;
//! the `transfer-risk` binary is a thin argument-parsing shell around
//! [`runners::run`].

pub mod config;
pub mod error;
pub mod instance;
pub mod output;
pub mod runners;
