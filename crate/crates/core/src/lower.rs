//! Lower-level solves at a requested KKT accuracy and the comprehensive
//! residual used both inside the solver (accuracy contract) and in the
//! benchmark validity filter.
//!
//! Bound constraints on `y` are folded into the constraint list as general
//! inequalities, ordered as: general constraints in declaration order, then
//! `l_i - y_i` for every finite lower bound (ascending `i`), then
//! `y_i - u_i` for every finite upper bound (ascending `i`). Multiplier
//! vectors follow the same order.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{PoisonSource, Result, SolveError};
use crate::problem::{project_box, BilevelProblem};

/// Central finite-difference step used for black-box lower-level gradients.
pub const H_FD: f64 = 1e-7;

/// Approximate follower response at some `x` with its multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerLevelSolution {
    pub y: Vec<f64>,
    /// One multiplier per folded constraint (general, then bound).
    pub multipliers: Vec<f64>,
    /// Residual as computed by [`kkt_residual`] at `(y, multipliers)`.
    pub kkt_residual: f64,
    pub lower_objective_value: f64,
    /// Lower objective evaluations spent producing this solution.
    pub obj_evals_used: u64,
}

/// A pluggable lower-level solver.
///
/// Implementations must be deterministic given `(x, zeta, warm_start)` and
/// aim for `kkt_residual <= zeta`; [`solve_lower`] re-verifies the claim
/// independently.
pub trait LowerLevelOracle: Send + Sync {
    fn solve(
        &self,
        problem: &BilevelProblem,
        x: &[f64],
        zeta: f64,
        warm_start: Option<&[f64]>,
    ) -> Result<LowerLevelSolution>;

    fn name(&self) -> &'static str;
}

/// Number of folded lower-level constraints (general plus finite bounds).
pub fn folded_constraint_count(problem: &BilevelProblem) -> usize {
    let b = problem.y_bounds();
    problem.num_lower_constraints()
        + b.lower().iter().filter(|l| l.is_finite()).count()
        + b.upper().iter().filter(|u| u.is_finite()).count()
}

/// Values of the folded constraints at `(x, y)`.
pub fn folded_constraint_values(
    problem: &BilevelProblem,
    x: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    let mut g = problem.lower_constraint_values(x, y)?;
    let b = problem.y_bounds();
    for (i, l) in b.lower().iter().enumerate() {
        if l.is_finite() {
            g.push(l - y[i]);
        }
    }
    for (i, u) in b.upper().iter().enumerate() {
        if u.is_finite() {
            g.push(y[i] - u);
        }
    }
    Ok(g)
}

fn fd_gradient<E>(y: &[f64], mut eval: E) -> Result<Vec<f64>>
where
    E: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(y.len());
    let mut probe = y.to_vec();
    for i in 0..y.len() {
        let yi = y[i];
        probe[i] = yi + H_FD;
        let fp = eval(&probe)?;
        probe[i] = yi - H_FD;
        let fm = eval(&probe)?;
        probe[i] = yi;
        grad.push((fp - fm) / (2.0 * H_FD));
    }
    Ok(grad)
}

/// `grad_y f(x, y)`: analytic when registered, central differences
/// otherwise. `evals` is charged for every lower objective call made.
fn lower_objective_gradient(
    problem: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    evals: &mut u64,
) -> Result<Vec<f64>> {
    if let Some(g) = problem.lower_gradient(x, y) {
        return g;
    }
    let grad = fd_gradient(y, |p| {
        *evals += 1;
        problem.lower_objective(x, p)
    })?;
    for (i, c) in grad.iter().enumerate() {
        if !c.is_finite() {
            return Err(SolveError::PoisonedEvaluation(PoisonSource::LowerGradient(i)));
        }
    }
    Ok(grad)
}

/// `grad_y g_j(x, y)` for a general constraint.
fn lower_constraint_gradient(
    problem: &BilevelProblem,
    j: usize,
    x: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    if problem.has_lower_constraint_gradients() {
        if let Some(g) = problem.lower_constraint_gradient(j, x, y) {
            return Ok(g);
        }
    }
    fd_gradient(y, |p| problem.lower_constraint_value(j, x, p))
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()))
}

/// Gradient of the lower-level Lagrangian restricted to the general
/// constraints: `grad f + sum_j lambda_j grad g_j`. Bound-constraint terms
/// are added by the caller (their gradients are unit vectors).
fn general_lagrangian_gradient(
    problem: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    lambda_general: &[f64],
    evals: &mut u64,
) -> Result<Vec<f64>> {
    let mut grad = lower_objective_gradient(problem, x, y, evals)?;
    for (j, &lj) in lambda_general.iter().enumerate() {
        if lj == 0.0 {
            continue;
        }
        let gj = lower_constraint_gradient(problem, j, x, y)?;
        for (gi, ci) in grad.iter_mut().zip(gj) {
            *gi += lj * ci;
        }
    }
    Ok(grad)
}

fn kkt_residual_counted(
    problem: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    multipliers: &[f64],
    evals: &mut u64,
) -> Result<f64> {
    let total = folded_constraint_count(problem);
    if multipliers.len() != total {
        return Err(SolveError::DimensionMismatch {
            expected: total,
            got: multipliers.len(),
        });
    }
    if y.len() != problem.n_y() {
        return Err(SolveError::DimensionMismatch {
            expected: problem.n_y(),
            got: y.len(),
        });
    }
    let q = problem.num_lower_constraints();
    let mut grad_l = general_lagrangian_gradient(problem, x, y, &multipliers[..q], evals)?;

    // bound-constraint contributions: grad(l_i - y_i) = -e_i, grad(y_i - u_i) = +e_i
    let b = problem.y_bounds();
    let mut k = q;
    for (i, l) in b.lower().iter().enumerate() {
        if l.is_finite() {
            grad_l[i] -= multipliers[k];
            k += 1;
        }
    }
    for (i, u) in b.upper().iter().enumerate() {
        if u.is_finite() {
            grad_l[i] += multipliers[k];
            k += 1;
        }
    }

    let g = folded_constraint_values(problem, x, y)?;
    let stationarity = norm_inf(&grad_l);
    let complementarity = g
        .iter()
        .zip(multipliers)
        .fold(0.0_f64, |acc, (gi, li)| acc.max((-li).max(*gi).abs()));
    let violation = g.iter().fold(0.0_f64, |acc, gi| acc.max(gi.max(0.0)));
    let res = stationarity.max(complementarity).max(violation);
    if !res.is_finite() {
        return Err(SolveError::PoisonedEvaluation(PoisonSource::LowerGradient(0)));
    }
    Ok(res)
}

/// Comprehensive KKT residual of the lower-level problem at `(x, y)` with
/// multipliers for the folded constraints:
///
/// ```text
/// max{ ||grad_y L||_inf, ||max{-lambda, g}||_inf, ||max{0, g}||_inf }
/// ```
///
/// Zero exactly at a KKT point with exact multipliers (up to
/// finite-difference error when gradients are not registered).
pub fn kkt_residual(
    problem: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    multipliers: &[f64],
) -> Result<f64> {
    let mut scratch = 0;
    kkt_residual_counted(problem, x, y, multipliers, &mut scratch)
}

/// Warm start for the next lower-level solve: the previous solution when
/// present, otherwise none (the oracle falls back to the box midpoint with 0
/// substituted on unbounded coordinates).
pub fn default_warm_start(previous: Option<&LowerLevelSolution>) -> Option<Vec<f64>> {
    previous.map(|s| s.y.clone())
}

/// Solve the lower level at accuracy `zeta` and independently re-verify the
/// accuracy contract; an oracle claim that does not withstand verification
/// is surfaced as [`SolveError::AccuracyNotReached`].
pub fn solve_lower(
    oracle: &dyn LowerLevelOracle,
    problem: &BilevelProblem,
    x: &[f64],
    zeta: f64,
    warm_start: Option<&[f64]>,
) -> Result<LowerLevelSolution> {
    if !(zeta > 0.0) {
        return Err(SolveError::InvalidArgument("lower-level accuracy must be positive"));
    }
    let mut sol = oracle.solve(problem, x, zeta, warm_start)?;
    let verified = kkt_residual(problem, x, &sol.y, &sol.multipliers)?;
    sol.kkt_residual = verified;
    if verified > zeta {
        return Err(SolveError::AccuracyNotReached {
            requested: zeta,
            achieved: verified,
            best: sol,
        });
    }
    Ok(sol)
}

// ---------------------------------------------------------------------------
// Built-in numeric oracle
// ---------------------------------------------------------------------------

/// Augmented-Lagrangian outer loop over a projected-gradient inner solver
/// with Armijo backtracking. Bound constraints are handled by projection;
/// multipliers for them are synthesized from the Lagrangian gradient at the
/// final point.
#[derive(Debug, Clone)]
pub struct BuiltinOracle {
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for BuiltinOracle {
    fn default() -> Self {
        Self {
            max_outer: 60,
            max_inner: 4000,
        }
    }
}

struct AlContext<'a> {
    problem: &'a BilevelProblem,
    x: &'a [f64],
    lambda: Vec<f64>,
    mu: f64,
    evals: u64,
}

impl<'a> AlContext<'a> {
    fn objective(&mut self, y: &[f64]) -> Result<f64> {
        self.evals += 1;
        let f = self.problem.lower_objective(self.x, y)?;
        let mut penalty = 0.0;
        for j in 0..self.problem.num_lower_constraints() {
            let gj = self.problem.lower_constraint_value(j, self.x, y)?;
            let t = (self.lambda[j] + self.mu * gj).max(0.0);
            penalty += t * t - self.lambda[j] * self.lambda[j];
        }
        Ok(f + penalty / (2.0 * self.mu))
    }

    fn gradient(&mut self, y: &[f64]) -> Result<Vec<f64>> {
        let mut evals = self.evals;
        let mut grad = lower_objective_gradient(self.problem, self.x, y, &mut evals)?;
        self.evals = evals;
        for j in 0..self.problem.num_lower_constraints() {
            let gj = self.problem.lower_constraint_value(j, self.x, y)?;
            let w = (self.lambda[j] + self.mu * gj).max(0.0);
            if w == 0.0 {
                continue;
            }
            let cg = lower_constraint_gradient(self.problem, j, self.x, y)?;
            for (gi, ci) in grad.iter_mut().zip(cg) {
                *gi += w * ci;
            }
        }
        Ok(grad)
    }
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

impl BuiltinOracle {
    /// Spectral projected-gradient descent with Armijo backtracking on the
    /// augmented Lagrangian. The Barzilai-Borwein step makes the iteration
    /// exact on separable quadratics; when the objective is bitwise flat
    /// near a minimizer with large value, progress is accepted on a decrease
    /// of the projected-gradient measure instead.
    fn inner_solve(&self, ctx: &mut AlContext<'_>, y0: Vec<f64>, tol: f64) -> Result<Vec<f64>> {
        const ARMIJO: f64 = 1e-4;
        let bounds = ctx.problem.y_bounds().clone();
        let mut y = y0;
        let mut fy = ctx.objective(&y)?;
        let mut g = ctx.gradient(&y)?;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut t_spec = 1.0_f64;
        let mut best_measure = f64::INFINITY;
        let mut since_best = 0_usize;

        for _ in 0..self.max_inner {
            let full: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - gi).collect();
            let measure = inf_dist(&y, &project_box(&full, &bounds)?);
            if measure <= tol {
                break;
            }
            if measure < 0.9 * best_measure {
                best_measure = measure;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > 30 {
                    break;
                }
            }

            if let Some((py, pg)) = &prev {
                let mut ss = 0.0;
                let mut sq = 0.0;
                for i in 0..y.len() {
                    let s = y[i] - py[i];
                    let q = g[i] - pg[i];
                    ss += s * s;
                    sq += s * q;
                }
                if sq > 0.0 {
                    t_spec = (ss / sq).clamp(1e-12, 1e12);
                }
            }

            // Armijo backtracking from the spectral step
            let mut accepted: Option<(Vec<f64>, f64, Option<Vec<f64>>)> = None;
            let mut t = t_spec;
            for _ in 0..60 {
                let cand: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - t * gi).collect();
                let cand = project_box(&cand, &bounds)?;
                let dist2: f64 = y.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 > 0.0 {
                    let fc = ctx.objective(&cand)?;
                    if fc <= fy - ARMIJO / t * dist2 {
                        accepted = Some((cand, fc, None));
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-18 {
                    break;
                }
            }
            // plateau fallback: the objective cannot discriminate, but the
            // projected-gradient measure still can
            if accepted.is_none() {
                let mut t = t_spec;
                for _ in 0..40 {
                    let cand: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - t * gi).collect();
                    let cand = project_box(&cand, &bounds)?;
                    if cand != y {
                        let gc = ctx.gradient(&cand)?;
                        let full: Vec<f64> =
                            cand.iter().zip(&gc).map(|(yi, gi)| yi - gi).collect();
                        let mc = inf_dist(&cand, &project_box(&full, &bounds)?);
                        if mc <= 0.5 * measure {
                            let fc = ctx.objective(&cand)?;
                            accepted = Some((cand, fc, Some(gc)));
                            break;
                        }
                    }
                    t *= 0.5;
                    if t < 1e-18 {
                        break;
                    }
                }
            }
            match accepted {
                Some((cand, fc, gc)) => {
                    let gc = match gc {
                        Some(v) => v,
                        None => ctx.gradient(&cand)?,
                    };
                    prev = Some((
                        core::mem::replace(&mut y, cand),
                        core::mem::replace(&mut g, gc),
                    ));
                    fy = fc;
                }
                None => break,
            }
        }
        Ok(y)
    }

    /// Clip coordinates that backtracking left marginally inside a bound the
    /// gradient is pushing against, so bound multipliers can be recovered.
    fn snap_to_bounds(problem: &BilevelProblem, y: &mut [f64], grad_l: &[f64]) {
        let b = problem.y_bounds();
        for i in 0..y.len() {
            let (l, u) = (b.lower()[i], b.upper()[i]);
            let snap = 1e-10 * (1.0 + y[i].abs());
            if l.is_finite() && grad_l[i] > 0.0 && y[i] - l <= snap {
                y[i] = l;
            }
            if u.is_finite() && grad_l[i] < 0.0 && u - y[i] <= snap {
                y[i] = u;
            }
        }
    }

    /// Multipliers for the folded bound constraints from the general
    /// Lagrangian gradient at the final point.
    fn bound_multipliers(problem: &BilevelProblem, y: &[f64], grad_l: &[f64]) -> Vec<f64> {
        let b = problem.y_bounds();
        let mut lam = Vec::new();
        for (i, l) in b.lower().iter().enumerate() {
            if l.is_finite() {
                lam.push(if y[i] == *l { grad_l[i].max(0.0) } else { 0.0 });
            }
        }
        for (i, u) in b.upper().iter().enumerate() {
            if u.is_finite() {
                lam.push(if y[i] == *u { (-grad_l[i]).max(0.0) } else { 0.0 });
            }
        }
        lam
    }
}

impl LowerLevelOracle for BuiltinOracle {
    fn solve(
        &self,
        problem: &BilevelProblem,
        x: &[f64],
        zeta: f64,
        warm_start: Option<&[f64]>,
    ) -> Result<LowerLevelSolution> {
        if !(zeta > 0.0) {
            return Err(SolveError::InvalidArgument("lower-level accuracy must be positive"));
        }
        let bounds = problem.y_bounds().clone();
        let y0 = match warm_start {
            Some(w) => project_box(w, &bounds)?,
            None => bounds.midpoint_or_zero(),
        };
        let q = problem.num_lower_constraints();
        let mut ctx = AlContext {
            problem,
            x,
            lambda: vec![0.0; q],
            mu: 10.0,
            evals: 0,
        };
        let mut y = y0;
        let mut tol = (0.5 * zeta).max(1e-15);
        let mut best: Option<LowerLevelSolution> = None;
        let mut prev_violation = f64::INFINITY;
        let mut stalled = 0_usize;

        for _ in 0..self.max_outer {
            y = self.inner_solve(&mut ctx, y, tol)?;

            // first-order multiplier estimates at the new point
            let mut violation = 0.0_f64;
            for j in 0..q {
                let gj = problem.lower_constraint_value(j, x, &y)?;
                ctx.lambda[j] = (ctx.lambda[j] + ctx.mu * gj).max(0.0);
                violation = violation.max(gj.max(0.0));
            }

            let mut evals = ctx.evals;
            let grad_l = general_lagrangian_gradient(problem, x, &y, &ctx.lambda, &mut evals)?;
            ctx.evals = evals;
            Self::snap_to_bounds(problem, &mut y, &grad_l);
            let mut multipliers = ctx.lambda.clone();
            multipliers.extend(Self::bound_multipliers(problem, &y, &grad_l));

            let mut evals = ctx.evals;
            let residual = kkt_residual_counted(problem, x, &y, &multipliers, &mut evals)?;
            ctx.evals = evals;

            ctx.evals += 1;
            let fval = problem.lower_objective(x, &y)?;
            let sol = LowerLevelSolution {
                y: y.clone(),
                multipliers,
                kkt_residual: residual,
                lower_objective_value: fval,
                obj_evals_used: ctx.evals,
            };
            let improved = best
                .as_ref()
                .map_or(true, |b| residual < 0.9 * b.kkt_residual);
            if best.as_ref().map_or(true, |b| residual < b.kkt_residual) {
                best = Some(sol.clone());
            }
            if residual <= zeta {
                let mut done = sol;
                done.obj_evals_used = ctx.evals;
                return Ok(done);
            }
            // residual has plateaued (finite-difference noise floor or a
            // genuinely hard instance); keep the failure cheap
            if improved {
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= 3 {
                    break;
                }
            }

            if q > 0 && violation > 0.25 * prev_violation {
                ctx.mu = (ctx.mu * 10.0).min(1e12);
            }
            prev_violation = violation;
            tol = (tol * 0.1).max(1e-16);
        }

        let mut best = best.expect("at least one outer pass runs");
        best.obj_evals_used = ctx.evals;
        Err(SolveError::AccuracyNotReached {
            requested: zeta,
            achieved: best.kkt_residual,
            best,
        })
    }

    fn name(&self) -> &'static str {
        "builtin"
    }
}

// ---------------------------------------------------------------------------
// Analytic oracle
// ---------------------------------------------------------------------------

/// Returns the registered closed-form reaction projected onto the `y`
/// bounds, with multipliers recovered by a least-squares solve of the
/// stationarity system restricted to active constraints. Negative
/// components are clipped to zero and the residual reported honestly.
#[derive(Debug, Clone, Default)]
pub struct AnalyticOracle;

/// Solve the symmetric positive semi-definite system `A x = b` in place via
/// Gaussian elimination with partial pivoting; `A` is `n x n` row-major.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-14 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col * n + k] * b[k];
        }
        b[col] = s / a[col * n + col];
    }
    Some(b)
}

impl LowerLevelOracle for AnalyticOracle {
    fn solve(
        &self,
        problem: &BilevelProblem,
        x: &[f64],
        zeta: f64,
        _warm_start: Option<&[f64]>,
    ) -> Result<LowerLevelSolution> {
        if !(zeta > 0.0) {
            return Err(SolveError::InvalidArgument("lower-level accuracy must be positive"));
        }
        let reaction = problem
            .analytic_reaction(x)
            .ok_or(SolveError::InvalidArgument(
                "analytic oracle requires a registered reaction",
            ))?;
        let y = project_box(&reaction, problem.y_bounds())?;
        let mut evals = 0_u64;

        let grad_f = lower_objective_gradient(problem, x, &y, &mut evals)?;
        let g = folded_constraint_values(problem, x, &y)?;
        let total = g.len();
        let q = problem.num_lower_constraints();

        // active set at the projected reaction
        const ACT_TOL: f64 = 1e-8;
        let active: Vec<usize> = (0..total).filter(|&j| g[j] >= -ACT_TOL).collect();

        let mut multipliers = vec![0.0; total];
        if !active.is_empty() {
            // columns of the stationarity system, one per active constraint
            let n = problem.n_y();
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(active.len());
            for &j in &active {
                if j < q {
                    cols.push(lower_constraint_gradient(problem, j, x, &y)?);
                } else {
                    // folded bound constraint: gradient is -e_i or +e_i
                    let b = problem.y_bounds();
                    let mut col = vec![0.0; n];
                    let mut k = q;
                    let mut found = false;
                    for (i, l) in b.lower().iter().enumerate() {
                        if l.is_finite() {
                            if k == j {
                                col[i] = -1.0;
                                found = true;
                                break;
                            }
                            k += 1;
                        }
                    }
                    if !found {
                        for (i, u) in b.upper().iter().enumerate() {
                            if u.is_finite() {
                                if k == j {
                                    col[i] = 1.0;
                                    break;
                                }
                                k += 1;
                            }
                        }
                    }
                    cols.push(col);
                }
            }
            // normal equations of min ||G lam + grad_f||, with a small ridge
            // against rank deficiency
            let na = active.len();
            let mut ata = vec![0.0; na * na];
            let mut atb = vec![0.0; na];
            for r in 0..na {
                for c in 0..na {
                    let mut s = 0.0;
                    for i in 0..problem.n_y() {
                        s += cols[r][i] * cols[c][i];
                    }
                    ata[r * na + c] = s + if r == c { 1e-12 } else { 0.0 };
                }
                let mut s = 0.0;
                for i in 0..problem.n_y() {
                    s += cols[r][i] * grad_f[i];
                }
                atb[r] = -s;
            }
            if let Some(lam) = solve_dense(ata, atb) {
                for (slot, l) in active.iter().zip(lam) {
                    multipliers[*slot] = l.max(0.0);
                }
            }
        }

        evals += 1;
        let fval = problem.lower_objective(x, &y)?;
        let residual = kkt_residual_counted(problem, x, &y, &multipliers, &mut evals)?;
        Ok(LowerLevelSolution {
            y,
            multipliers,
            kkt_residual: residual,
            lower_objective_value: fval,
            obj_evals_used: evals,
        })
    }

    fn name(&self) -> &'static str {
        "analytic"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{BoxBounds, ScalarFn};
    use alloc::boxed::Box;

    /// min_y (y - x)^2, free y
    fn tracking_problem() -> BilevelProblem {
        BilevelProblem::new(
            Box::new(|x, y| (x[0] - 1.0).powi(2) + (y[0] - 1.0).powi(2)),
            Box::new(|x, y| (y[0] - x[0]).powi(2)),
            BoxBounds::uniform(1, -2.0, 2.0).unwrap(),
            BoxBounds::free(1),
        )
    }

    /// min_y y^2 s.t. 1 - y <= 0, free y
    fn general_constrained_problem() -> BilevelProblem {
        BilevelProblem::new(
            Box::new(|_, y| y[0]),
            Box::new(|_, y| y[0] * y[0]),
            BoxBounds::uniform(1, -2.0, 2.0).unwrap(),
            BoxBounds::free(1),
        )
        .with_lower_constraints(alloc::vec![Box::new(|_x: &[f64], y: &[f64]| 1.0 - y[0]) as ScalarFn])
        .with_lower_gradient(Box::new(|_, y| alloc::vec![2.0 * y[0]]))
        .with_lower_constraint_gradients(alloc::vec![
            Box::new(|_x: &[f64], _y: &[f64]| alloc::vec![-1.0]) as crate::problem::GradientFn
        ])
    }

    /// min_y y^2 s.t. y in [1, 2]
    fn bound_active_problem() -> BilevelProblem {
        BilevelProblem::new(
            Box::new(|_, y| y[0]),
            Box::new(|_, y| y[0] * y[0]),
            BoxBounds::uniform(1, -2.0, 2.0).unwrap(),
            BoxBounds::uniform(1, 1.0, 2.0).unwrap(),
        )
    }

    #[test]
    fn residual_zero_at_unconstrained_minimizer() {
        let p = tracking_problem();
        let r = kkt_residual(&p, &[1.0], &[1.0], &[]).unwrap();
        assert!(r.abs() <= 10.0 * H_FD, "r = {r}");
    }

    #[test]
    fn residual_matches_gradient_magnitude_off_optimum() {
        let p = tracking_problem();
        let r = kkt_residual(&p, &[1.0], &[1.1], &[]).unwrap();
        assert!((r - 0.2).abs() <= 1e-8, "r = {r}");
    }

    #[test]
    fn residual_zero_at_constrained_kkt_point() {
        let p = general_constrained_problem();
        let r = kkt_residual(&p, &[0.0], &[1.0], &[2.0]).unwrap();
        assert!(r.abs() <= 10.0 * H_FD, "r = {r}");
    }

    #[test]
    fn residual_rejects_wrong_multiplier_count() {
        let p = general_constrained_problem();
        assert!(matches!(
            kkt_residual(&p, &[0.0], &[1.0], &[]),
            Err(SolveError::DimensionMismatch { expected: 1, got: 0 })
        ));
    }

    #[test]
    fn residual_detects_complementarity_violation() {
        let p = general_constrained_problem();
        // y = 2 is feasible (g = -1) but lambda = 2 > 0 violates
        // complementarity: max{-2, -1} = -1 -> 1 in the infinity norm
        let r = kkt_residual(&p, &[0.0], &[2.0], &[2.0]).unwrap();
        assert!(r >= 1.0);
    }

    #[test]
    fn builtin_solves_tracking_problem() {
        let p = tracking_problem();
        let oracle = BuiltinOracle::default();
        let sol = solve_lower(&oracle, &p, &[0.7], 1e-6, None).unwrap();
        assert!((sol.y[0] - 0.7).abs() <= 1e-3);
        assert!(sol.kkt_residual <= 1e-6);
        assert!(sol.obj_evals_used > 0);
    }

    #[test]
    fn builtin_honors_warm_start_contract() {
        let p = tracking_problem();
        let oracle = BuiltinOracle::default();
        let sol = solve_lower(&oracle, &p, &[0.7], 1e-6, Some(&[0.69])).unwrap();
        // gradient bound: |2(y - 0.7)| <= 1e-6
        assert!(2.0 * (sol.y[0] - 0.7).abs() <= 1e-6 + 1e-12);
    }

    #[test]
    fn builtin_recovers_active_bound_multiplier() {
        let p = bound_active_problem();
        let oracle = BuiltinOracle::default();
        let sol = solve_lower(&oracle, &p, &[0.0], 1e-9, None).unwrap();
        assert_eq!(sol.y[0], 1.0);
        // folded order: lower-bound then upper-bound constraint
        assert!((sol.multipliers[0] - 2.0).abs() <= 1e-6);
        assert_eq!(sol.multipliers[1], 0.0);
        assert!(sol.kkt_residual <= 1e-9);
    }

    #[test]
    fn builtin_is_deterministic() {
        let p = general_constrained_problem();
        let oracle = BuiltinOracle::default();
        let a = solve_lower(&oracle, &p, &[0.3], 1e-8, Some(&[1.4])).unwrap();
        let b = solve_lower(&oracle, &p, &[0.3], 1e-8, Some(&[1.4])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn builtin_reaches_tight_accuracy_with_analytic_gradient() {
        let p = BilevelProblem::new(
            Box::new(|_, y| y[0]),
            Box::new(|x, y| 3.0 * (y[0] - x[0]).powi(2) + 5.0),
            BoxBounds::uniform(1, -2.0, 2.0).unwrap(),
            BoxBounds::free(1),
        )
        .with_lower_gradient(Box::new(|x, y| alloc::vec![6.0 * (y[0] - x[0])]));
        let oracle = BuiltinOracle::default();
        let sol = solve_lower(&oracle, &p, &[0.25], 1e-9, None).unwrap();
        assert!(sol.kkt_residual <= 1e-9);
        assert!((sol.y[0] - 0.25).abs() <= 1e-9);
    }

    #[test]
    fn solve_lower_rejects_nonpositive_accuracy() {
        let p = tracking_problem();
        let oracle = BuiltinOracle::default();
        assert!(solve_lower(&oracle, &p, &[0.0], 0.0, None).is_err());
    }

    #[test]
    fn exhausted_budget_carries_best_solution() {
        // curvature 3 keeps the first backtracked step off the minimizer
        let p = BilevelProblem::new(
            Box::new(|_, y| y[0]),
            Box::new(|x, y| 3.0 * (y[0] - x[0]).powi(2)),
            BoxBounds::uniform(1, -2.0, 2.0).unwrap(),
            BoxBounds::free(1),
        );
        let oracle = BuiltinOracle {
            max_outer: 1,
            max_inner: 1,
        };
        match solve_lower(&oracle, &p, &[0.7], 1e-12, Some(&[-1.5])) {
            Err(SolveError::AccuracyNotReached { requested, best, .. }) => {
                assert_eq!(requested, 1e-12);
                assert!(best.y[0].is_finite());
            }
            other => panic!("expected accuracy-not-reached, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_passthrough() {
        let sol = LowerLevelSolution {
            y: alloc::vec![0.3],
            multipliers: alloc::vec![],
            kkt_residual: 0.0,
            lower_objective_value: 0.0,
            obj_evals_used: 1,
        };
        assert_eq!(default_warm_start(Some(&sol)), Some(alloc::vec![0.3]));
        assert_eq!(default_warm_start(None), None);
    }

    #[test]
    fn analytic_oracle_uses_registered_reaction() {
        let p = tracking_problem().with_analytic_reaction(Box::new(|x| alloc::vec![x[0]]));
        let oracle = AnalyticOracle;
        let sol = solve_lower(&oracle, &p, &[0.7], 1e-6, None).unwrap();
        assert_eq!(sol.y, alloc::vec![0.7]);
        assert!(sol.kkt_residual <= 10.0 * H_FD);
    }

    #[test]
    fn analytic_oracle_recovers_bound_multiplier() {
        let p = bound_active_problem().with_analytic_reaction(Box::new(|_| alloc::vec![0.0]));
        // reaction 0 projects to the active lower bound y = 1
        let oracle = AnalyticOracle;
        let sol = solve_lower(&oracle, &p, &[0.0], 1e-5, None).unwrap();
        assert_eq!(sol.y, alloc::vec![1.0]);
        assert!((sol.multipliers[0] - 2.0).abs() <= 1e-5);
    }

    #[test]
    fn analytic_oracle_requires_registration() {
        let p = tracking_problem();
        assert!(matches!(
            AnalyticOracle.solve(&p, &[0.0], 1e-6, None),
            Err(SolveError::InvalidArgument(_))
        ));
    }

    #[test]
    fn folded_order_is_general_then_bounds() {
        let p = BilevelProblem::new(
            Box::new(|_, y| y[0]),
            Box::new(|_, y| y[0] * y[0] + y[1] * y[1]),
            BoxBounds::uniform(1, -1.0, 1.0).unwrap(),
            BoxBounds::new(alloc::vec![0.0, f64::NEG_INFINITY], alloc::vec![1.0, 5.0]).unwrap(),
        )
        .with_lower_constraints(alloc::vec![
            Box::new(|_x: &[f64], y: &[f64]| y[0] + y[1] - 3.0) as ScalarFn
        ]);
        assert_eq!(folded_constraint_count(&p), 4);
        let g = folded_constraint_values(&p, &[0.0], &[0.5, 2.0]).unwrap();
        // general, l_0 - y_0, y_0 - u_0, y_1 - u_1
        assert_eq!(g, alloc::vec![-0.5, -0.5, -0.5, -3.0]);
    }
}
