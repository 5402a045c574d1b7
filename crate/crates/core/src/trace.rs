//! Per-evaluation run records consumed by the benchmark harness.

use alloc::string::String;
use alloc::vec::Vec;

/// One upper-objective evaluation inside a run.
///
/// `alpha` and `success` describe the iteration the evaluation belongs to
/// and are identical across the iteration's rows; `rho` carries the penalty
/// parameters sparsely (present only on rows where they changed, including
/// the first penalized row).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: u64,
    pub success: bool,
    pub alpha: f64,
    pub alpha_tilde: f64,
    pub zeta: f64,
    /// Objective value seen by the solver (`P`, or `R_rho` when penalized).
    pub p_value: f64,
    /// Raw upper objective `F`.
    pub upper_value: f64,
    pub lower_evals_cum: u64,
    pub upper_evals_cum: u64,
    pub kkt_residual: f64,
    pub violation: f64,
    pub rho: Option<Vec<f64>>,
}

/// Full per-evaluation history of one solver run on one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub problem: String,
    pub solver: String,
    pub zeta_bar: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    /// Normalizer for data profiles, `n_x * n_y + 1`.
    pub fn normalizer(&self) -> f64 {
        (self.n_x * self.n_y + 1) as f64
    }

    /// Check that cumulative evaluation counts increase across rows.
    pub fn is_well_formed(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].lower_evals_cum > w[0].lower_evals_cum
                && w[1].upper_evals_cum > w[0].upper_evals_cum)
    }
}
