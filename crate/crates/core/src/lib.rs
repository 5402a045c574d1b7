//! Derivative-free solvers for bilevel optimization problems with adaptive
//! lower-level accuracy.
//!
//! The crate solves problems of the form
//!
//! ```text
//!     min_x  F(x, y)     s.t.  H(x, y) <= 0,  x in [l, u],  y in R(x)
//! ```
//!
//! where `R(x)` is the set of minimizers of a lower-level problem
//! `min_y f(x, y)` over bounds and general inequality constraints, and the
//! upper-level functions `F`, `H` are black boxes. Instead of resolving the
//! follower exactly at every upper-level trial point, the solver works with a
//! perturbed objective `P(x, zeta) = F(x, y~(x, zeta))` where `y~` is an
//! approximate lower-level solution with KKT residual at most `zeta`, and the
//! accuracy `zeta` is tightened only as the upper-level step sizes shrink.
//!
//! What lives where:
//!
//! * [`problem`] - problem containers, box projection, evaluation counting;
//! * [`lower`] - lower-level oracles and the comprehensive KKT residual;
//! * [`directions`] - Sobol-seeded orthonormal direction streams;
//! * [`solver`] - the linesearch solver family and its variants;
//! * [`penalty`] - exact penalty reformulation of upper-level constraints;
//! * [`trace`] - per-evaluation run records;
//! * [`profiles`] - validity filtering, cutoffs, data/performance profiles;
//! * [`suite`] - the built-in collection of test problems.
//!
//! The crate is `no_std`-compatible (with `alloc`); enable the `libm` feature
//! instead of `std` to build without the standard library. File formats, CSV
//! traces and the command-line driver live in the companion `bilevel-dfo`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("bilevel-dfo-core requires either the `std` or the `libm` feature");

pub mod directions;
pub mod error;
pub mod lower;
pub mod penalty;
pub mod problem;
pub mod profiles;
pub mod solver;
pub mod suite;
pub mod trace;

pub use error::{PoisonSource, SolveError};
pub use lower::{
    default_warm_start, kkt_residual, solve_lower, AnalyticOracle, BuiltinOracle,
    LowerLevelOracle, LowerLevelSolution,
};
pub use problem::{eval_upper, project_box, upper_violation, BilevelProblem, BoxBounds, EvalCounters};
pub use solver::{
    alpha_min, goldstein_epsilon, run, Clock, NoClock, RunResult, SolverConfig, StopReason, Variant,
};
pub use trace::{RunTrace, TraceRow};
