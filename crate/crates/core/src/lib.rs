//! Stochastic indirect data-driven predictive control.
//!
//! The pipeline runs from raw trajectory data to a receding-horizon
//! controller: [`signal`] arranges offline data into the partitioned signal
//! matrix, [`predictor`] turns it into a regularized stochastic output
//! predictor with mean and covariance, [`estimator`] Kalman-filters the
//! output initial condition, and [`controller`] minimizes the expected cost
//! under second-order-cone tightened chance constraints. [`lti`] provides the
//! ground-truth plant used to generate data and to check results.

pub mod controller;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod lti;
pub mod rng;
pub mod predictor;
pub mod signal;

pub use error::{DdpcError, Result};
