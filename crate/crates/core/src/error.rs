//! Error types shared across the crate.

use core::fmt;

use crate::lower::LowerLevelSolution;

/// Which black box produced a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoisonSource {
    UpperObjective,
    /// Index into the upper-level constraint list.
    UpperConstraint(usize),
    LowerObjective,
    /// Index into the folded lower-level constraint list.
    LowerConstraint(usize),
    /// Component index of a lower-level gradient.
    LowerGradient(usize),
}

impl fmt::Display for PoisonSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoisonSource::UpperObjective => write!(f, "upper objective"),
            PoisonSource::UpperConstraint(i) => write!(f, "upper constraint {i}"),
            PoisonSource::LowerObjective => write!(f, "lower objective"),
            PoisonSource::LowerConstraint(i) => write!(f, "lower constraint {i}"),
            PoisonSource::LowerGradient(i) => write!(f, "lower gradient component {i}"),
        }
    }
}

/// Errors raised by problem evaluation, lower-level solves and the solver.
#[derive(Debug, Clone)]
pub enum SolveError {
    /// A vector did not have the dimension required by its contract.
    DimensionMismatch { expected: usize, got: usize },
    /// An argument violated a precondition that is not dimensional.
    InvalidArgument(&'static str),
    /// Solver or penalty configuration failed validation.
    InvalidConfig(&'static str),
    /// A black box returned NaN or an infinity.
    PoisonedEvaluation(PoisonSource),
    /// The lower-level oracle exhausted its budget before reaching the
    /// requested residual; carries the best solution found.
    AccuracyNotReached {
        requested: f64,
        achieved: f64,
        best: LowerLevelSolution,
    },
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            SolveError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            SolveError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            SolveError::PoisonedEvaluation(src) => {
                write!(f, "non-finite value from {src}")
            }
            SolveError::AccuracyNotReached {
                requested,
                achieved,
                ..
            } => write!(
                f,
                "lower-level accuracy not reached: requested {requested:e}, achieved {achieved:e}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SolveError {}

pub type Result<T> = core::result::Result<T, SolveError>;
