//! Chance-constrained imitation learning for resource oversubscription.
//!
//! The crate provides the usage-telemetry generator, the cloud and airline
//! oversubscription environments, hand-written MLP approximators, the
//! chance-constraint machinery (tightening, value ensembles, safety-layer
//! projection), the training loops for COIN and its baselines, and the
//! evaluation metrics.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod airlineenv;
pub mod chance;
pub mod cloudenv;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod telemetry;
pub mod trainer;

pub use error::{Error, Result};
