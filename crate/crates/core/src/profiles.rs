//! Bilevel-adapted benchmarking: validity filtering, per-problem cutoffs,
//! data profiles and performance profiles over recorded run traces.
//!
//! A recorded point counts only if its upper-level violation is at most
//! 1e-4 and its lower-level KKT residual is at most `zeta_bar`; everything
//! else contributes an infinite objective to profile construction. The
//! computational metric is the cumulative number of lower-level objective
//! evaluations.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Result, SolveError};
use crate::trace::{RunTrace, TraceRow};

/// Upper-level violation threshold of the validity filter.
pub const VIOLATION_TOL: f64 = 1e-4;
/// KKT relaxation factor used when locating the worst valid objective.
pub const KKT_RELAXATION: f64 = 1e2;

/// Validity filter: violation <= 1e-4 and KKT residual <= zeta_bar, both
/// inclusive. Non-finite objective values never count.
pub fn is_valid(row: &TraceRow, zeta_bar: f64) -> bool {
    row.upper_value.is_finite() && row.violation <= VIOLATION_TOL && row.kkt_residual <= zeta_bar
}

fn relaxed_valid(row: &TraceRow, zeta_bar: f64) -> bool {
    row.upper_value.is_finite()
        && row.violation <= VIOLATION_TOL
        && row.kkt_residual <= KKT_RELAXATION * zeta_bar
}

/// Per-problem cutoff `c_p = F_min + tau (F_max - F_min)`, where `F_min` is
/// the best objective over rows valid at `zeta_bar` and `F_max` the worst
/// over rows valid under the relaxed KKT bound (violation threshold
/// unchanged).
#[derive(Debug, Clone, PartialEq)]
pub struct Cutoff {
    pub f_min: f64,
    pub f_max: f64,
    pub value: f64,
}

/// Compute the cutoff from all traces of one problem; `None` marks the
/// undefined case (no row anywhere is valid at `zeta_bar`).
pub fn compute_cutoff(traces: &[&RunTrace], tau: f64, zeta_bar: f64) -> Option<Cutoff> {
    let mut f_min = f64::INFINITY;
    let mut f_max = f64::NEG_INFINITY;
    for trace in traces {
        for row in &trace.rows {
            if is_valid(row, zeta_bar) {
                f_min = f_min.min(row.upper_value);
            }
            if relaxed_valid(row, zeta_bar) {
                f_max = f_max.max(row.upper_value);
            }
        }
    }
    if !f_min.is_finite() {
        return None;
    }
    // rows valid at zeta_bar are also valid under the relaxation
    debug_assert!(f_max >= f_min);
    Some(Cutoff {
        f_min,
        f_max,
        value: f_min + tau * (f_max - f_min),
    })
}

/// Smallest cumulative lower-evaluation count at which a trace has a valid
/// row with objective at or below the cutoff.
pub fn solved_at(trace: &RunTrace, cutoff: &Cutoff, zeta_bar: f64) -> Option<u64> {
    trace
        .rows
        .iter()
        .find(|row| is_valid(row, zeta_bar) && row.upper_value <= cutoff.value)
        .map(|row| row.lower_evals_cum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Data,
    Performance,
}

/// A family of step curves, one per solver, over a shared abscissa grid.
#[derive(Debug, Clone)]
pub struct ProfileResult {
    pub kind: ProfileKind,
    pub tau: f64,
    pub zeta_bar: f64,
    /// Solver names, sorted; `curves` and `solved_at` follow this order.
    pub solvers: Vec<String>,
    /// Problems entering the denominator, sorted.
    pub problems: Vec<String>,
    /// Problems excluded for undefined cutoffs.
    pub excluded: Vec<String>,
    /// Jump points of the curves (normalized budgets or ratios), ascending.
    pub abscissas: Vec<f64>,
    /// `curves[s][i]`: fraction of problems solver `s` solves within
    /// `abscissas[i]`.
    pub curves: Vec<Vec<f64>>,
    /// `solved_at[s][p]`: normalized cost (data) or ratio (performance);
    /// `None` when the problem is never solved.
    pub solved_at: Vec<Vec<Option<f64>>>,
}

impl ProfileResult {
    /// Fraction of listed problems a solver eventually solves.
    pub fn solved_fraction(&self, solver_index: usize) -> f64 {
        if self.problems.is_empty() {
            return 0.0;
        }
        let n = self.solved_at[solver_index]
            .iter()
            .filter(|v| v.is_some())
            .count();
        n as f64 / self.problems.len() as f64
    }

    /// Mean curve height over the abscissa span (from 0 for data profiles,
    /// from 1 for performance profiles); equals the terminal fraction when
    /// the span is degenerate.
    pub fn area_under_curve(&self, solver_index: usize) -> f64 {
        let curve = &self.curves[solver_index];
        if self.abscissas.is_empty() {
            return 0.0;
        }
        let start = match self.kind {
            ProfileKind::Data => 0.0,
            ProfileKind::Performance => 1.0,
        };
        let end = *self.abscissas.last().expect("nonempty");
        if end <= start {
            return *curve.last().expect("nonempty");
        }
        // right-continuous step curve: value holds from each jump onward
        let mut area = 0.0;
        let mut level = 0.0;
        let mut at = start;
        for (x, f) in self.abscissas.iter().zip(curve) {
            if *x > at {
                area += level * (x - at);
                at = *x;
            }
            level = *f;
        }
        area / (end - start)
    }
}

/// Group traces by problem, then by solver; the first trace wins for a
/// duplicated (solver, problem) pair.
fn group<'a>(
    traces: &'a [RunTrace],
) -> (
    Vec<String>,
    Vec<String>,
    BTreeMap<(&'a str, &'a str), &'a RunTrace>,
) {
    let mut by_pair: BTreeMap<(&str, &str), &RunTrace> = BTreeMap::new();
    let mut solvers: Vec<String> = Vec::new();
    let mut problems: Vec<String> = Vec::new();
    for t in traces {
        by_pair.entry((t.problem.as_str(), t.solver.as_str())).or_insert(t);
        if !solvers.contains(&t.solver) {
            solvers.push(t.solver.clone());
        }
        if !problems.contains(&t.problem) {
            problems.push(t.problem.clone());
        }
    }
    solvers.sort();
    problems.sort();
    (solvers, problems, by_pair)
}

/// Cutoffs for every problem present in `traces`; the second list names the
/// problems with undefined cutoffs (excluded from profile denominators).
pub fn build_cutoffs(
    traces: &[RunTrace],
    tau: f64,
    zeta_bar: f64,
) -> (BTreeMap<String, Cutoff>, Vec<String>) {
    let (_, problems, _) = group(traces);
    let mut cutoffs = BTreeMap::new();
    let mut excluded = Vec::new();
    for p in problems {
        let of_p: Vec<&RunTrace> = traces.iter().filter(|t| t.problem == p).collect();
        match compute_cutoff(&of_p, tau, zeta_bar) {
            Some(c) => {
                cutoffs.insert(p, c);
            }
            None => excluded.push(p),
        }
    }
    (cutoffs, excluded)
}

fn step_curves(
    solvers: &[String],
    problems: &[String],
    values: &[Vec<Option<f64>>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut abscissas: Vec<f64> = values
        .iter()
        .flatten()
        .flatten()
        .copied()
        .collect();
    abscissas.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    abscissas.dedup();
    let denom = problems.len() as f64;
    let curves = (0..solvers.len())
        .map(|s| {
            abscissas
                .iter()
                .map(|x| {
                    let n = values[s]
                        .iter()
                        .flatten()
                        .filter(|v| **v <= *x)
                        .count();
                    if denom == 0.0 { 0.0 } else { n as f64 / denom }
                })
                .collect()
        })
        .collect();
    (abscissas, curves)
}

/// Data profile: fraction of problems solved to the cutoff accuracy as a
/// function of the lower-evaluation budget normalized by `n_x * n_y + 1`.
pub fn data_profile(
    traces: &[RunTrace],
    cutoffs: &BTreeMap<String, Cutoff>,
    excluded: &[String],
    tau: f64,
    zeta_bar: f64,
) -> ProfileResult {
    let (solvers, mut problems, by_pair) = group(traces);
    problems.retain(|p| cutoffs.contains_key(p));
    let solved: Vec<Vec<Option<f64>>> = solvers
        .iter()
        .map(|s| {
            problems
                .iter()
                .map(|p| {
                    let trace = by_pair.get(&(p.as_str(), s.as_str()))?;
                    let c = &cutoffs[p];
                    solved_at(trace, c, zeta_bar).map(|t| t as f64 / trace.normalizer())
                })
                .collect()
        })
        .collect();
    let (abscissas, curves) = step_curves(&solvers, &problems, &solved);
    ProfileResult {
        kind: ProfileKind::Data,
        tau,
        zeta_bar,
        solvers,
        problems,
        excluded: excluded.to_vec(),
        abscissas,
        curves,
        solved_at: solved,
    }
}

/// Performance profile: fraction of problems solved within a ratio of the
/// best solver's raw lower-evaluation count. Requires at least two solvers.
pub fn performance_profile(
    traces: &[RunTrace],
    cutoffs: &BTreeMap<String, Cutoff>,
    excluded: &[String],
    tau: f64,
    zeta_bar: f64,
) -> Result<ProfileResult> {
    let (solvers, mut problems, by_pair) = group(traces);
    if solvers.len() < 2 {
        return Err(SolveError::InvalidArgument(
            "performance profiles require at least two solvers",
        ));
    }
    problems.retain(|p| cutoffs.contains_key(p));
    // raw costs t_{p,s}
    let costs: Vec<Vec<Option<u64>>> = solvers
        .iter()
        .map(|s| {
            problems
                .iter()
                .map(|p| {
                    let trace = by_pair.get(&(p.as_str(), s.as_str()))?;
                    solved_at(trace, &cutoffs[p], zeta_bar)
                })
                .collect()
        })
        .collect();
    let ratios: Vec<Vec<Option<f64>>> = (0..solvers.len())
        .map(|s| {
            (0..problems.len())
                .map(|p| {
                    let t = costs[s][p]?;
                    let best = (0..solvers.len())
                        .filter_map(|other| costs[other][p])
                        .min()
                        .expect("some solver solved p");
                    Some(t as f64 / best as f64)
                })
                .collect()
        })
        .collect();
    let (abscissas, curves) = step_curves(&solvers, &problems, &ratios);
    Ok(ProfileResult {
        kind: ProfileKind::Performance,
        tau,
        zeta_bar,
        solvers,
        problems,
        excluded: excluded.to_vec(),
        abscissas,
        curves,
        solved_at: ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn row(lower_cum: u64, f: f64, violation: f64, kkt: f64) -> TraceRow {
        TraceRow {
            k: 0,
            success: true,
            alpha: 0.1,
            alpha_tilde: 0.1,
            zeta: 1e-6,
            p_value: f,
            upper_value: f,
            lower_evals_cum: lower_cum,
            upper_evals_cum: lower_cum,
            kkt_residual: kkt,
            violation,
            rho: None,
        }
    }

    fn trace(problem: &str, solver: &str, rows: Vec<TraceRow>) -> RunTrace {
        RunTrace {
            problem: problem.to_string(),
            solver: solver.to_string(),
            zeta_bar: 1e-6,
            n_x: 1,
            n_y: 1,
            rows,
        }
    }

    #[test]
    fn validity_thresholds_are_inclusive() {
        assert!(is_valid(&row(1, 0.0, 0.0, 5e-7), 1e-6));
        assert!(!is_valid(&row(1, 0.0, 2e-4, 0.0), 1e-6));
        assert!(is_valid(&row(1, 0.0, 1e-4, 1e-6), 1e-6));
        assert!(!is_valid(&row(1, f64::NAN, 0.0, 0.0), 1e-6));
    }

    #[test]
    fn cutoff_hand_computation() {
        let t = trace("p", "s", vec![row(1, 1.0, 0.0, 1e-7), row(2, 3.0, 0.0, 1e-7)]);
        let c = compute_cutoff(&[&t], 0.1, 1e-6).unwrap();
        assert_eq!(c.f_min, 1.0);
        assert_eq!(c.f_max, 3.0);
        assert!((c.value - 1.2).abs() <= 1e-15);
    }

    #[test]
    fn cutoff_degenerate_range() {
        let t = trace("p", "s", vec![row(1, 2.5, 0.0, 1e-8)]);
        let c = compute_cutoff(&[&t], 0.7, 1e-6).unwrap();
        assert_eq!(c.value, 2.5);
    }

    #[test]
    fn cutoff_undefined_without_strictly_valid_rows() {
        // valid only under the relaxed bound -> F_min undefined
        let t = trace("p", "s", vec![row(1, 2.5, 0.0, 5e-5)]);
        assert!(compute_cutoff(&[&t], 0.1, 1e-6).is_none());
    }

    #[test]
    fn relaxation_widens_only_fmax() {
        let t = trace(
            "p",
            "s",
            vec![row(1, 1.0, 0.0, 1e-7), row(2, 9.0, 0.0, 9e-5), row(3, 11.0, 3e-4, 1e-8)],
        );
        // row 2 is 1e2-relaxed valid; row 3 violates the upper-level filter
        let c = compute_cutoff(&[&t], 0.5, 1e-6).unwrap();
        assert_eq!(c.f_min, 1.0);
        assert_eq!(c.f_max, 9.0);
    }

    #[test]
    fn data_profile_single_problem_jump() {
        // normalizer n_x * n_y + 1 = 2; solved at 10 lower evals -> kappa 5
        let t = trace("p", "s", vec![row(10, 0.5, 0.0, 1e-8)]);
        let traces = vec![t];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        let prof = data_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6);
        assert_eq!(prof.abscissas, vec![5.0]);
        assert_eq!(prof.curves, vec![vec![1.0]]);
    }

    #[test]
    fn data_profile_two_problems() {
        let t1 = trace("p1", "s", vec![row(3, 1.0, 0.0, 1e-8)]);
        let mut t2 = trace("p2", "s", vec![row(7, 2.0, 0.0, 1e-8)]);
        t2.n_x = 1;
        t2.n_y = 0; // normalizer 1
        let traces = vec![t1, t2];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        let prof = data_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6);
        // jumps at 1.5 (p1, normalizer 2) and 7 (p2, normalizer 1)
        assert_eq!(prof.abscissas, vec![1.5, 7.0]);
        assert_eq!(prof.curves, vec![vec![0.5, 1.0]]);
    }

    #[test]
    fn unsolved_problems_cap_the_curve() {
        let t1 = trace("p1", "s", vec![row(3, 1.0, 0.0, 1e-8)]);
        // p2: defined cutoff thanks to another solver, but `s` never valid
        let t2 = trace("p2", "s", vec![row(5, 2.0, 0.0, 1.0)]);
        let t3 = trace("p2", "other", vec![row(9, 2.0, 0.0, 1e-8)]);
        let traces = vec![t1, t2, t3];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        let prof = data_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6);
        let s_index = prof.solvers.iter().position(|s| s == "s").unwrap();
        assert_eq!(*prof.curves[s_index].last().unwrap(), 0.5);
    }

    #[test]
    fn performance_profile_hand_computation() {
        let a = trace("p", "a", vec![row(10, 1.0, 0.0, 1e-8)]);
        let b = trace("p", "b", vec![row(20, 1.0, 0.0, 1e-8)]);
        let traces = vec![a, b];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        let prof = performance_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6).unwrap();
        assert_eq!(prof.abscissas, vec![1.0, 2.0]);
        // a jumps to 1 at ratio 1, b at ratio 2
        assert_eq!(prof.curves[0], vec![1.0, 1.0]);
        assert_eq!(prof.curves[1], vec![0.0, 1.0]);
    }

    #[test]
    fn identical_traces_coincide_at_ratio_one() {
        let a = trace("p", "a", vec![row(10, 1.0, 0.0, 1e-8)]);
        let b = trace("p", "b", vec![row(10, 1.0, 0.0, 1e-8)]);
        let traces = vec![a, b];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        let prof = performance_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6).unwrap();
        assert_eq!(prof.abscissas, vec![1.0]);
        assert_eq!(prof.curves, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn never_solving_solver_has_zero_curve() {
        let a = trace("p", "a", vec![row(10, 1.0, 0.0, 1e-8)]);
        let b = trace("p", "b", vec![row(10, 1.0, 0.0, 1.0)]);
        let traces = vec![a, b];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        let prof = performance_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6).unwrap();
        let b_index = prof.solvers.iter().position(|s| s == "b").unwrap();
        assert!(prof.curves[b_index].iter().all(|f| *f == 0.0));
        assert_eq!(prof.solved_fraction(b_index), 0.0);
    }

    #[test]
    fn performance_profile_needs_two_solvers() {
        let a = trace("p", "a", vec![row(10, 1.0, 0.0, 1e-8)]);
        let traces = vec![a];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        assert!(performance_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6).is_err());
    }

    #[test]
    fn curves_are_monotone_and_bounded() {
        let traces = vec![
            trace("p1", "a", vec![row(2, 1.0, 0.0, 1e-8), row(9, 0.5, 0.0, 1e-8)]),
            trace("p2", "a", vec![row(4, 3.0, 0.0, 1e-8)]),
            trace("p1", "b", vec![row(6, 0.9, 0.0, 1e-8)]),
            trace("p2", "b", vec![row(1, 3.5, 0.0, 1e-7)]),
        ];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.3, 1e-6);
        for prof in [
            data_profile(&traces, &cutoffs, &excluded, 0.3, 1e-6),
            performance_profile(&traces, &cutoffs, &excluded, 0.3, 1e-6).unwrap(),
        ] {
            for curve in &prof.curves {
                let mut prev = 0.0;
                for f in curve {
                    assert!(*f >= prev && *f <= 1.0);
                    prev = *f;
                }
            }
        }
    }

    #[test]
    fn permuting_trace_order_never_changes_curves() {
        let mut traces = vec![
            trace("p1", "a", vec![row(2, 1.0, 0.0, 1e-8)]),
            trace("p2", "a", vec![row(4, 3.0, 0.0, 1e-8)]),
            trace("p1", "b", vec![row(6, 0.9, 0.0, 1e-8)]),
            trace("p2", "b", vec![row(1, 3.5, 0.0, 1e-7)]),
        ];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.3, 1e-6);
        let before = data_profile(&traces, &cutoffs, &excluded, 0.3, 1e-6);
        traces.reverse();
        let after = data_profile(&traces, &cutoffs, &excluded, 0.3, 1e-6);
        assert_eq!(before.abscissas, after.abscissas);
        assert_eq!(before.curves, after.curves);
        assert_eq!(before.solvers, after.solvers);
    }

    #[test]
    fn cutoff_is_monotone_in_tau() {
        let t = trace("p", "s", vec![row(1, 1.0, 0.0, 1e-7), row(2, 3.0, 0.0, 1e-5)]);
        let c1 = compute_cutoff(&[&t], 1e-3, 1e-6).unwrap();
        let c2 = compute_cutoff(&[&t], 1e-1, 1e-6).unwrap();
        assert!(c1.value <= c2.value);
    }

    #[test]
    fn excluded_problems_leave_the_denominator() {
        let t1 = trace("good", "a", vec![row(2, 1.0, 0.0, 1e-8)]);
        let t2 = trace("bad", "a", vec![row(2, 1.0, 0.0, 1.0)]);
        let t3 = trace("good", "b", vec![row(4, 1.0, 0.0, 1e-8)]);
        let t4 = trace("bad", "b", vec![row(4, 1.0, 0.0, 1.0)]);
        let traces = vec![t1, t2, t3, t4];
        let (cutoffs, excluded) = build_cutoffs(&traces, 0.1, 1e-6);
        assert_eq!(excluded, vec!["bad".to_string()]);
        let prof = data_profile(&traces, &cutoffs, &excluded, 0.1, 1e-6);
        assert_eq!(prof.problems, vec!["good".to_string()]);
        assert_eq!(*prof.curves[0].last().unwrap(), 1.0);
    }
}
