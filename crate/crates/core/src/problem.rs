//! Bilevel problem containers, box projection and evaluation counting.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{PoisonSource, Result, SolveError};

/// Scalar black box of both decision vectors, `(x, y) -> f64`.
pub type ScalarFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Vector black box of both decision vectors, used for analytic gradients.
pub type GradientFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// Closed-form follower response `x -> y`.
pub type ReactionFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Componentwise bounds `l_i <= v_i <= u_i`; infinite sentinels mark
/// unbounded sides.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(SolveError::InvalidArgument("bounds must have dimension > 0"));
        }
        if lower.len() != upper.len() {
            return Err(SolveError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l <= u) {
                return Err(SolveError::InvalidArgument("bounds require lower_i <= upper_i"));
            }
        }
        Ok(Self { lower, upper })
    }

    /// All coordinates unbounded.
    pub fn free(dim: usize) -> Self {
        Self {
            lower: alloc::vec![f64::NEG_INFINITY; dim],
            upper: alloc::vec![f64::INFINITY; dim],
        }
    }

    /// Same finite interval `[lo, hi]` on every coordinate.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(alloc::vec![lo; dim], alloc::vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| *l <= *x && *x <= *u)
    }

    /// Box midpoint with 0 substituted on coordinates where either side is
    /// unbounded; used as the default lower-level starting point.
    pub fn midpoint_or_zero(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| {
                if l.is_finite() && u.is_finite() {
                    0.5 * (l + u)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Largest finite side length, or `None` when no coordinate has two
    /// finite bounds.
    pub fn max_finite_extent(&self) -> Option<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .filter_map(|(l, u)| {
                let w = u - l;
                w.is_finite().then_some(w)
            })
            .fold(None, |acc, w| Some(acc.map_or(w, |a: f64| a.max(w))))
    }
}

/// Componentwise projection `[x]_{[l,u]} = max{l, min{u, x}}`.
pub fn project_box(x: &[f64], bounds: &BoxBounds) -> Result<Vec<f64>> {
    if x.len() != bounds.dim() {
        return Err(SolveError::DimensionMismatch {
            expected: bounds.dim(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(bounds.lower().iter().zip(bounds.upper()))
        .map(|(v, (l, u))| l.max(u.min(*v)))
        .collect())
}

/// Infinity norm of the positive parts, `max_i max{0, h_i}`; 0 for an empty
/// list.
pub fn upper_violation(h_values: &[f64]) -> f64 {
    h_values.iter().fold(0.0, |acc, h| acc.max(*h))
}

/// Evaluation counters owned by exactly one run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalCounters {
    pub upper_evals: u64,
    pub lower_obj_evals: u64,
    pub lower_solver_calls: u64,
    pub wall_time: f64,
}

/// A bilevel problem: black-box upper level `(F, H)` over `x in x_bounds`,
/// black-box lower level `(f, g)` over `y in y_bounds`.
///
/// All evaluation maps must be deterministic for fixed inputs. Analytic
/// registrations (follower reaction, lower-level gradients) are optional and
/// only consulted by components that declare so.
pub struct BilevelProblem {
    n_x: usize,
    n_y: usize,
    upper_objective: ScalarFn,
    upper_constraints: Vec<ScalarFn>,
    lower_objective: ScalarFn,
    lower_constraints: Vec<ScalarFn>,
    x_bounds: BoxBounds,
    y_bounds: BoxBounds,
    analytic_reaction: Option<ReactionFn>,
    lower_gradient: Option<GradientFn>,
    lower_constraint_gradients: Vec<GradientFn>,
}

impl core::fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("n_x", &self.n_x)
            .field("n_y", &self.n_y)
            .field("m", &self.upper_constraints.len())
            .field("lower_constraints", &self.lower_constraints.len())
            .field("analytic_reaction", &self.analytic_reaction.is_some())
            .finish()
    }
}

impl BilevelProblem {
    pub fn new(
        upper_objective: ScalarFn,
        lower_objective: ScalarFn,
        x_bounds: BoxBounds,
        y_bounds: BoxBounds,
    ) -> Self {
        Self {
            n_x: x_bounds.dim(),
            n_y: y_bounds.dim(),
            upper_objective,
            upper_constraints: Vec::new(),
            lower_objective,
            lower_constraints: Vec::new(),
            x_bounds,
            y_bounds,
            analytic_reaction: None,
            lower_gradient: None,
            lower_constraint_gradients: Vec::new(),
        }
    }

    pub fn with_upper_constraints(mut self, constraints: Vec<ScalarFn>) -> Self {
        self.upper_constraints = constraints;
        self
    }

    pub fn with_lower_constraints(mut self, constraints: Vec<ScalarFn>) -> Self {
        self.lower_constraints = constraints;
        self
    }

    /// Register a closed-form follower response for test problems.
    pub fn with_analytic_reaction(mut self, reaction: ReactionFn) -> Self {
        self.analytic_reaction = Some(reaction);
        self
    }

    /// Register the analytic gradient of the lower objective w.r.t. `y`.
    pub fn with_lower_gradient(mut self, grad: GradientFn) -> Self {
        self.lower_gradient = Some(grad);
        self
    }

    /// Register analytic gradients of the general lower constraints w.r.t.
    /// `y`, aligned with the constraint list.
    pub fn with_lower_constraint_gradients(mut self, grads: Vec<GradientFn>) -> Self {
        self.lower_constraint_gradients = grads;
        self
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    /// Number of upper-level constraints.
    pub fn m(&self) -> usize {
        self.upper_constraints.len()
    }

    pub fn num_lower_constraints(&self) -> usize {
        self.lower_constraints.len()
    }

    pub fn x_bounds(&self) -> &BoxBounds {
        &self.x_bounds
    }

    pub fn y_bounds(&self) -> &BoxBounds {
        &self.y_bounds
    }

    pub fn has_analytic_reaction(&self) -> bool {
        self.analytic_reaction.is_some()
    }

    pub fn analytic_reaction(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.analytic_reaction.as_ref().map(|r| r(x))
    }

    pub fn has_lower_gradient(&self) -> bool {
        self.lower_gradient.is_some()
    }

    /// Analytic `grad_y f(x, y)` when registered.
    pub fn lower_gradient(&self, x: &[f64], y: &[f64]) -> Option<Result<Vec<f64>>> {
        self.lower_gradient.as_ref().map(|g| {
            let v = g(x, y);
            match v.iter().position(|c| !c.is_finite()) {
                Some(i) => Err(SolveError::PoisonedEvaluation(PoisonSource::LowerGradient(i))),
                None => Ok(v),
            }
        })
    }

    pub fn has_lower_constraint_gradients(&self) -> bool {
        !self.lower_constraint_gradients.is_empty()
    }

    /// Analytic `grad_y g_j(x, y)` when registered.
    pub fn lower_constraint_gradient(&self, j: usize, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        self.lower_constraint_gradients.get(j).map(|g| g(x, y))
    }

    /// Raw upper-level evaluation, poison-checked; no counting.
    pub fn upper(&self, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let f = (self.upper_objective)(x, y);
        if !f.is_finite() {
            return Err(SolveError::PoisonedEvaluation(PoisonSource::UpperObjective));
        }
        let mut h = Vec::with_capacity(self.upper_constraints.len());
        for (i, c) in self.upper_constraints.iter().enumerate() {
            let v = c(x, y);
            if !v.is_finite() {
                return Err(SolveError::PoisonedEvaluation(PoisonSource::UpperConstraint(i)));
            }
            h.push(v);
        }
        Ok((f, h))
    }

    /// Lower objective value, poison-checked; no counting.
    pub fn lower_objective(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let v = (self.lower_objective)(x, y);
        if !v.is_finite() {
            return Err(SolveError::PoisonedEvaluation(PoisonSource::LowerObjective));
        }
        Ok(v)
    }

    /// Values of the general lower-level constraints, poison-checked.
    pub fn lower_constraint_values(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut g = Vec::with_capacity(self.lower_constraints.len());
        for (i, c) in self.lower_constraints.iter().enumerate() {
            let v = c(x, y);
            if !v.is_finite() {
                return Err(SolveError::PoisonedEvaluation(PoisonSource::LowerConstraint(i)));
            }
            g.push(v);
        }
        Ok(g)
    }

    pub fn lower_constraint_value(&self, j: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        let v = (self.lower_constraints[j])(x, y);
        if !v.is_finite() {
            return Err(SolveError::PoisonedEvaluation(PoisonSource::LowerConstraint(j)));
        }
        Ok(v)
    }
}

/// Evaluate `(F, H)` at `(x, y)` and charge one upper evaluation to
/// `counters`. The counter is charged even when the evaluation poisons.
pub fn eval_upper(
    problem: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    counters: &mut EvalCounters,
) -> Result<(f64, Vec<f64>)> {
    if x.len() != problem.n_x() {
        return Err(SolveError::DimensionMismatch {
            expected: problem.n_x(),
            got: x.len(),
        });
    }
    if y.len() != problem.n_y() {
        return Err(SolveError::DimensionMismatch {
            expected: problem.n_y(),
            got: y.len(),
        });
    }
    counters.upper_evals += 1;
    problem.upper(x, y)
}
