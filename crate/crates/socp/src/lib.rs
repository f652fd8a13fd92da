//! Dense primal-dual interior-point solver for convex quadratic programs with
//! linear equality, linear inequality and second-order cone constraints.
//!
//! Problems are small and dense (tens of variables, cones of a few hundred
//! rows), so the implementation favors a compact reduced KKT system over
//! sparse machinery. Given the same input, every run performs the same
//! floating-point operations in the same order.

mod cones;
mod dump;
mod kkt;
mod program;
mod residuals;
mod solver;

pub use dump::{format_g17, read_text, write_text};
pub use program::{ConeProgram, ProgramError, SocConstraint};
pub use residuals::{kkt_residuals, KktResiduals};
pub use solver::{solve, solve_with, Duals, Residuals, Settings, Solution, Status, WarmStart};
