//! Scenario configuration and experiment orchestration for the stochastic
//! DDPC library.
//!
//! A [`config::ScenarioConfig`] is read from JSON, resolved into a validated
//! [`scenario::Scenario`], and executed either as a single closed-loop run or
//! as a parallel Monte Carlo campaign whose artifacts are written by
//! [`artifacts`]. The `ddpc` binary wraps all of this in [`cli`].

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod montecarlo;
pub mod scenario;

pub use error::{HarnessError, Result};
