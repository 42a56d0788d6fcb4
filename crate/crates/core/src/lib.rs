//! Dual-control state-of-charge management for multi-battery systems.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: Coulomb-counting plant with polynomial OCV observation curves.
//! - [`estimator`]: running extended Kalman filter and the prediction-only
//!   covariance rollout used inside the controller.
//! - [`cost`]: stage costs on samples and on (mean, covariance) pairs, the
//!   deterministic surrogate and realized closed-loop cost.
//! - [`qp`]: dense ADMM solver for box/inequality constrained convex QPs.
//! - [`mpc`]: certainty-equivalence linear MPC, the LPV candidate step and the
//!   randomized dual-control step.
//! - [`harness`]: closed-loop simulation, paired Monte Carlo runner and CLI.

pub mod cost;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod qp;

pub use error::{Error, Result};
