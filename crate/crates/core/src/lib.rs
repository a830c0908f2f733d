//! Closed-loop insulin delivery simulation around a glycemic safety tube
//! controller.
//!
//! The crate bundles the Bergman plant ([`patient`]), a fixed-step closed-loop
//! engine ([`sim`]), the EKF state estimator ([`estimator`]), the three-stage
//! tube controller ([`gstc`]), its feasibility checker and gain synthesizer
//! ([`feasibility`]), comparator controllers ([`baselines`]), clinical metrics
//! ([`metrics`]), Monte Carlo batches ([`scenarios`]) and the scenario file
//! format ([`config`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod error;
pub mod estimator;
pub mod feasibility;
pub mod gstc;
pub mod integrator;
pub mod metrics;
pub mod patient;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
