//! The linesearch derivative-free solver family with lower-level adaptive
//! accuracy, operating on any perturbed objective (plain or penalized).
//!
//! One outer iteration polls a single search direction through the projected
//! extrapolation procedure (or a bare acceptance test for the no-linesearch
//! variant). Successful iterations move the iterate and keep the accuracy
//! parameter `zeta`; unsuccessful iterations shrink the tentative step and
//! may tighten `zeta`, coupling the two through
//! `zeta' = max{zeta_bar, min{theta zeta, alpha~^3}}`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::directions::SobolDirectionStream;
use crate::error::{Result, SolveError};
use crate::lower::{default_warm_start, solve_lower, LowerLevelOracle, LowerLevelSolution};
use crate::penalty::PenalizedPerturbed;
use crate::problem::{
    eval_upper, project_box, upper_violation, BilevelProblem, BoxBounds, EvalCounters,
};
use crate::trace::{RunTrace, TraceRow};

/// Elapsed-time source for the wall-clock budget; keeps the solver free of
/// platform timers.
pub trait Clock {
    fn elapsed_secs(&self) -> f64;
}

/// Clock that never advances; time budgets never fire.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn elapsed_secs(&self) -> f64 {
        0.0
    }
}

/// Algorithm variant.
///
/// * `DfnLla` - single tentative step shared by all directions, basis
///   regenerated after every `n_x` polls;
/// * `MsDfnLla` - one tentative step per basis column, basis regenerated
///   only when all steps fall below the threshold `eta`;
/// * `MsDfnNlLla` - multi-stepsize without the extrapolation phase;
/// * `MsDfnLlf` - multi-stepsize with the lower-level tolerance pinned at
///   `zeta_bar` for the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    DfnLla,
    MsDfnLla,
    MsDfnNlLla,
    MsDfnLlf,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::DfnLla => "DFN_LLA",
            Variant::MsDfnLla => "MS_DFN_LLA",
            Variant::MsDfnNlLla => "MS_DFN_NL_LLA",
            Variant::MsDfnLlf => "MS_DFN_LLF",
        }
    }

    /// Parse a variant name; `-` and `_` are interchangeable, case ignored.
    pub fn parse(s: &str) -> Option<Variant> {
        let mut k = String::new();
        for c in s.chars() {
            k.push(if c == '-' { '_' } else { c.to_ascii_uppercase() });
        }
        match k.as_str() {
            "DFN_LLA" => Some(Variant::DfnLla),
            "MS_DFN_LLA" => Some(Variant::MsDfnLla),
            "MS_DFN_NL_LLA" => Some(Variant::MsDfnNlLla),
            "MS_DFN_LLF" => Some(Variant::MsDfnLlf),
            _ => None,
        }
    }

    pub fn all() -> [Variant; 4] {
        [
            Variant::DfnLla,
            Variant::MsDfnLla,
            Variant::MsDfnNlLla,
            Variant::MsDfnLlf,
        ]
    }

    fn multi_step(&self) -> bool {
        !matches!(self, Variant::DfnLla)
    }
}

/// Solver parameters; defaults follow the reference settings
/// (`zeta0 = 0.1`, `sigma = 1e-18`, `gamma = 1e-6`, `theta = delta = 0.5`).
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub variant: Variant,
    /// Step/accuracy contraction factor, in (0, 1).
    pub theta: f64,
    /// Coupling constant in `alpha_min = (sigma * zeta_bar)^(1/3)`.
    pub sigma: f64,
    /// Sufficient-decrease constant, > 0.
    pub gamma: f64,
    /// Extrapolation expansion factor, in (0, 1).
    pub delta: f64,
    /// Target lower-level accuracy, >= 0.
    pub zeta_bar: f64,
    /// Initial lower-level accuracy, >= zeta_bar.
    pub zeta0: f64,
    /// Initial tentative step; default `max(1, zeta0^(1/3))`.
    pub alpha0: Option<f64>,
    /// Initial basis-regeneration threshold for multi-stepsize variants;
    /// default `1e-3 * max(1, largest finite upper-box extent)`.
    pub eta0: Option<f64>,
    /// Upper-evaluation budget.
    pub max_upper_evals: u64,
    /// Wall-time budget in seconds.
    pub max_wall_time: f64,
}

impl SolverConfig {
    pub fn new(variant: Variant, zeta_bar: f64) -> Self {
        Self {
            variant,
            theta: 0.5,
            sigma: 1e-18,
            gamma: 1e-6,
            delta: 0.5,
            zeta_bar,
            zeta0: 0.1,
            alpha0: None,
            eta0: None,
            max_upper_evals: 1500,
            max_wall_time: 9000.0,
        }
    }

    /// Initial accuracy actually used: the fixed-accuracy variant pins
    /// `zeta` at `zeta_bar` from the start.
    pub fn effective_zeta0(&self) -> f64 {
        if self.variant == Variant::MsDfnLlf {
            self.zeta_bar
        } else {
            self.zeta0
        }
    }

    pub fn resolved_alpha0(&self) -> f64 {
        self.alpha0
            .unwrap_or_else(|| 1.0_f64.max(self.effective_zeta0().cbrt()))
    }

    pub fn resolved_eta0(&self, x_bounds: &BoxBounds) -> f64 {
        self.eta0
            .unwrap_or_else(|| 1e-3 * 1.0_f64.max(x_bounds.max_finite_extent().unwrap_or(1.0)))
    }

    pub fn validate(&self) -> Result<()> {
        for (v, what) in [
            (self.theta, "theta must lie in (0, 1)"),
            (self.sigma, "sigma must lie in (0, 1)"),
            (self.delta, "delta must lie in (0, 1)"),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SolveError::InvalidConfig(what));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(SolveError::InvalidConfig("gamma must be positive"));
        }
        if !(self.zeta_bar >= 0.0) {
            return Err(SolveError::InvalidConfig("zeta_bar must be non-negative"));
        }
        if self.variant == Variant::MsDfnLlf {
            if !(self.zeta_bar > 0.0) {
                return Err(SolveError::InvalidConfig(
                    "the fixed-accuracy variant requires zeta_bar > 0",
                ));
            }
        } else {
            if !(self.zeta0 >= self.zeta_bar) {
                return Err(SolveError::InvalidConfig("zeta0 must be at least zeta_bar"));
            }
            if !(self.zeta0 > 0.0) {
                return Err(SolveError::InvalidConfig("zeta0 must be positive"));
            }
        }
        let z0 = self.effective_zeta0();
        if self.resolved_alpha0() < z0.cbrt() {
            return Err(SolveError::InvalidConfig("alpha0 must be at least zeta0^(1/3)"));
        }
        if let Some(e) = self.eta0 {
            if !(e > 0.0) {
                return Err(SolveError::InvalidConfig("eta0 must be positive"));
            }
        }
        if self.max_upper_evals == 0 {
            return Err(SolveError::InvalidConfig("evaluation budget must be positive"));
        }
        Ok(())
    }
}

/// Smallest admissible tentative step, `(sigma * zeta_bar)^(1/3)`.
pub fn alpha_min(sigma: f64, zeta_bar: f64) -> f64 {
    (sigma * zeta_bar).cbrt()
}

/// Accuracy update applied on unsuccessful iterations:
/// `max{zeta_bar, min{theta * zeta, alpha~^3}}` when the cubed next step has
/// fallen below `zeta`, otherwise no change. A positive `alpha_k`
/// short-circuits (successful iterations keep `zeta`).
pub fn zeta_update(
    alpha_k: f64,
    alpha_tilde_next: f64,
    zeta_k: f64,
    theta: f64,
    zeta_bar: f64,
) -> f64 {
    if alpha_k > 0.0 {
        return zeta_k;
    }
    let cubed = alpha_tilde_next * alpha_tilde_next * alpha_tilde_next;
    if cubed < zeta_k {
        zeta_bar.max((theta * zeta_k).min(cubed))
    } else {
        zeta_k
    }
}

/// Stationarity radius of the inexact-accuracy regime,
/// `4 gamma alpha_min + 8 L_F zeta_bar / alpha_min`; diagnostic only.
pub fn goldstein_epsilon(gamma: f64, alpha_min: f64, l_f: f64, zeta_bar: f64) -> Result<f64> {
    if !(alpha_min > 0.0) {
        return Err(SolveError::InvalidArgument(
            "goldstein_epsilon requires alpha_min > 0",
        ));
    }
    Ok(4.0 * gamma * alpha_min + 8.0 * l_f * zeta_bar / alpha_min)
}

/// Acceptance test of the no-linesearch variant: accept as soon as a probe
/// satisfies sufficient decrease, and grow the tentative step by `1/delta`
/// instead of extrapolating.
pub fn accept_nl(
    p_trial: f64,
    p_current: f64,
    alpha_tilde: f64,
    gamma: f64,
    delta: f64,
) -> (bool, f64) {
    if p_trial <= p_current - gamma * alpha_tilde * alpha_tilde {
        (true, alpha_tilde / delta)
    } else {
        (false, alpha_tilde)
    }
}

/// One full evaluation of the perturbed (possibly penalized) objective.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Objective value seen by the solver (`P` or `R_rho`).
    pub value: f64,
    /// Raw upper objective `F`.
    pub upper_value: f64,
    /// Upper constraint values `H`.
    pub h: Vec<f64>,
    pub lower: LowerLevelSolution,
}

/// Objective abstraction consumed by the solver: the plain perturbed
/// objective or its exact-penalty wrapping.
pub trait SolverObjective {
    fn eval(
        &mut self,
        problem: &BilevelProblem,
        oracle: &dyn LowerLevelOracle,
        x: &[f64],
        zeta: f64,
        warm: Option<&[f64]>,
        counters: &mut EvalCounters,
    ) -> Result<Evaluation>;

    /// Hook invoked once per outer iteration after the extrapolation call,
    /// with the constraint values at the (post-acceptance) current iterate
    /// and the iteration's `alpha_k`, `alpha~_k`. Returns true when
    /// objective parameters changed, invalidating cached values.
    fn end_iteration(&mut self, iteration: u64, h: &[f64], alpha: f64, alpha_tilde: f64) -> bool {
        let _ = (iteration, h, alpha, alpha_tilde);
        false
    }

    /// Current penalty parameters, if any.
    fn rho(&self) -> Option<&[f64]> {
        None
    }
}

/// Shared guts of the plain and penalized objectives: lower-level solve at
/// accuracy `zeta` with warm start, then the upper evaluation at `(x, y~)`.
pub(crate) fn eval_perturbed(
    problem: &BilevelProblem,
    oracle: &dyn LowerLevelOracle,
    x: &[f64],
    zeta: f64,
    warm: Option<&[f64]>,
    counters: &mut EvalCounters,
) -> Result<Evaluation> {
    counters.lower_solver_calls += 1;
    let lower = match solve_lower(oracle, problem, x, zeta, warm) {
        Ok(sol) => sol,
        Err(SolveError::AccuracyNotReached {
            requested,
            achieved,
            best,
        }) => {
            counters.lower_obj_evals += best.obj_evals_used;
            return Err(SolveError::AccuracyNotReached {
                requested,
                achieved,
                best,
            });
        }
        Err(e) => return Err(e),
    };
    counters.lower_obj_evals += lower.obj_evals_used;
    let (f, h) = eval_upper(problem, x, &lower.y, counters)?;
    Ok(Evaluation {
        value: f,
        upper_value: f,
        h,
        lower,
    })
}

/// Evaluate the plain perturbed objective `P(x, zeta) = F(x, y~(x, zeta))`,
/// charging `counters` for the solver call, its objective evaluations and
/// the upper evaluation.
pub fn perturbed_objective(
    problem: &BilevelProblem,
    oracle: &dyn LowerLevelOracle,
    x: &[f64],
    zeta: f64,
    warm: Option<&[f64]>,
    counters: &mut EvalCounters,
) -> Result<(f64, LowerLevelSolution)> {
    eval_perturbed(problem, oracle, x, zeta, warm, counters).map(|ev| (ev.value, ev.lower))
}

/// The plain perturbed objective as a [`SolverObjective`].
#[derive(Debug, Clone, Copy, Default)]
pub struct PerturbedObjective;

impl SolverObjective for PerturbedObjective {
    fn eval(
        &mut self,
        problem: &BilevelProblem,
        oracle: &dyn LowerLevelOracle,
        x: &[f64],
        zeta: f64,
        warm: Option<&[f64]>,
        counters: &mut EvalCounters,
    ) -> Result<Evaluation> {
        eval_perturbed(problem, oracle, x, zeta, warm, counters)
    }
}

/// Outcome of one projected-extrapolation call.
#[derive(Debug, Clone)]
pub struct Extrapolation {
    /// Accepted step; 0 when neither probe achieved sufficient decrease.
    pub alpha: f64,
    /// Whether the accepted direction is `-d` (false on failure, by
    /// convention).
    pub flipped: bool,
    /// Baseline value `P(x, zeta)` used in the tests.
    pub p_base: f64,
    /// Objective value at the accepted point when `alpha > 0`.
    pub p_accepted: Option<f64>,
}

fn trial_point(x: &[f64], d: &[f64], t: f64, bounds: &BoxBounds) -> Result<Vec<f64>> {
    let moved: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
    project_box(&moved, bounds)
}

/// Probe `+d` then `-d` at the tentative step, then expand the step by
/// `1/delta` while the sufficient-decrease test holds under box projection.
///
/// `p_at_x` short-circuits the baseline evaluation when the caller already
/// holds `P(x, zeta)`; with `None` the procedure evaluates the baseline
/// first. A projection step that produces no new point terminates the
/// expansion without spending an evaluation (stall at a box face).
pub fn projected_extrapolation<E>(
    mut p: E,
    x: &[f64],
    d: &[f64],
    alpha_tilde: f64,
    bounds: &BoxBounds,
    gamma: f64,
    delta: f64,
    p_at_x: Option<f64>,
) -> Result<Extrapolation>
where
    E: FnMut(&[f64]) -> Result<f64>,
{
    if !(alpha_tilde > 0.0) {
        return Err(SolveError::InvalidArgument(
            "extrapolation requires a positive tentative step",
        ));
    }
    let p_base = match p_at_x {
        Some(v) => v,
        None => p(x)?,
    };

    let mut alpha = alpha_tilde;
    let threshold = p_base - gamma * alpha * alpha;
    let plus = trial_point(x, d, alpha, bounds)?;
    let p_plus = p(&plus)?;
    let (flipped, mut point, mut value) = if p_plus <= threshold {
        (false, plus, p_plus)
    } else {
        let minus = trial_point(x, d, -alpha, bounds)?;
        let p_minus = p(&minus)?;
        if p_minus <= threshold {
            (true, minus, p_minus)
        } else {
            return Ok(Extrapolation {
                alpha: 0.0,
                flipped: false,
                p_base,
                p_accepted: None,
            });
        }
    };

    let sign = if flipped { -1.0 } else { 1.0 };
    loop {
        let beta = alpha / delta;
        let next = trial_point(x, d, sign * beta, bounds)?;
        if next == point {
            break;
        }
        let p_next = p(&next)?;
        if p_next > p_base - gamma * beta * beta {
            break;
        }
        alpha = beta;
        point = next;
        value = p_next;
    }
    Ok(Extrapolation {
        alpha,
        flipped,
        p_base,
        p_accepted: Some(value),
    })
}

/// Why a run terminated.
#[derive(Debug, Clone)]
pub enum StopReason {
    EvalBudget,
    TimeBudget,
    StepsBelowAlphaMin,
    /// A propagated evaluation error converted the run into a failure
    /// record; the partial trace is preserved.
    Failure(SolveError),
}

impl StopReason {
    pub fn name(&self) -> &'static str {
        match self {
            StopReason::EvalBudget => "eval_budget",
            StopReason::TimeBudget => "time_budget",
            StopReason::StepsBelowAlphaMin => "steps_below_alpha_min",
            StopReason::Failure(_) => "failure",
        }
    }
}

/// Per-iteration history entry.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: u64,
    /// Direction polled this iteration (the accepted `+-d` on success).
    pub direction: Vec<f64>,
    /// Accepted step, 0 on failure.
    pub alpha: f64,
    /// Tentative step the iteration started with (the polled direction's
    /// step for multi-stepsize variants).
    pub alpha_tilde: f64,
    /// Largest tentative step entering the iteration; equals `alpha_tilde`
    /// for the single-stepsize variant.
    pub alpha_tilde_max: f64,
    pub zeta: f64,
    pub success: bool,
    /// Objective value at the accepted iterate.
    pub p_value: f64,
    pub lower_evals_cum: u64,
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub x_best: Vec<f64>,
    /// Perturbed objective value at the best iterate (NaN when nothing was
    /// evaluated before a failure).
    pub p_best: f64,
    /// Whether the best iterate passed the validity filter
    /// (upper violation <= 1e-4 and KKT residual <= zeta_bar).
    pub best_valid: bool,
    pub best_upper_value: f64,
    pub best_violation: f64,
    pub best_kkt: f64,
    pub stop: StopReason,
    pub iterations: u64,
    pub final_zeta: f64,
    pub counters: EvalCounters,
    pub history: Vec<IterationRecord>,
    pub trace: RunTrace,
}

struct CurrentEval {
    eval: Evaluation,
    zeta: f64,
    rho_epoch: u64,
}

struct BestTracker {
    x: Vec<f64>,
    p: f64,
    valid: bool,
    upper_value: f64,
    violation: f64,
    kkt: f64,
    seen: bool,
}

impl BestTracker {
    fn new(x0: &[f64]) -> Self {
        Self {
            x: x0.to_vec(),
            p: f64::NAN,
            valid: false,
            upper_value: f64::NAN,
            violation: f64::NAN,
            kkt: f64::NAN,
            seen: false,
        }
    }

    /// Accepted iterates only; valid points dominate invalid ones, ties
    /// broken by the perturbed value.
    fn consider(&mut self, x: &[f64], ev: &Evaluation, zeta_bar: f64) {
        let violation = upper_violation(&ev.h);
        let valid = violation <= 1e-4 && ev.lower.kkt_residual <= zeta_bar;
        let better = if !self.seen {
            true
        } else if valid != self.valid {
            valid
        } else {
            ev.value < self.p
        };
        if better {
            self.x = x.to_vec();
            self.p = ev.value;
            self.valid = valid;
            self.upper_value = ev.upper_value;
            self.violation = violation;
            self.kkt = ev.lower.kkt_residual;
            self.seen = true;
        }
    }
}

struct Driver<'a> {
    problem: &'a BilevelProblem,
    oracle: &'a dyn LowerLevelOracle,
    objective: &'a mut dyn SolverObjective,
    config: &'a SolverConfig,
    a_min: f64,
    x: Vec<f64>,
    zeta: f64,
    steps: Vec<f64>,
    eta: f64,
    stream: SobolDirectionStream,
    warm: Option<LowerLevelSolution>,
    current: Option<CurrentEval>,
    rho_epoch: u64,
    counters: EvalCounters,
    k: u64,
    history: Vec<IterationRecord>,
    rows: Vec<TraceRow>,
    pending: Vec<TraceRow>,
    last_rho_written: Option<Vec<f64>>,
    best: BestTracker,
}

impl<'a> Driver<'a> {
    /// Evaluate the composed objective at `x`, recording a trace row.
    fn evaluate(&mut self, x: &[f64], alpha_tilde: f64) -> Result<Evaluation> {
        let warm = default_warm_start(self.warm.as_ref());
        let ev = self.objective.eval(
            self.problem,
            self.oracle,
            x,
            self.zeta,
            warm.as_deref(),
            &mut self.counters,
        )?;
        let rho = match self.objective.rho() {
            Some(r) if self.last_rho_written.as_deref() != Some(r) => {
                self.last_rho_written = Some(r.to_vec());
                Some(r.to_vec())
            }
            _ => None,
        };
        self.pending.push(TraceRow {
            k: self.k,
            success: false,
            alpha: 0.0,
            alpha_tilde,
            zeta: self.zeta,
            p_value: ev.value,
            upper_value: ev.upper_value,
            lower_evals_cum: self.counters.lower_obj_evals,
            upper_evals_cum: self.counters.upper_evals,
            kkt_residual: ev.lower.kkt_residual,
            violation: upper_violation(&ev.h),
            rho,
        });
        Ok(ev)
    }

    /// Make sure `P(x_k, zeta_k)` under the current penalty parameters is
    /// available; re-evaluates after `zeta` or `rho` changed.
    fn ensure_baseline(&mut self, alpha_tilde: f64) -> Result<()> {
        let stale = match &self.current {
            Some(c) => c.zeta != self.zeta || c.rho_epoch != self.rho_epoch,
            None => true,
        };
        if stale {
            let x = self.x.clone();
            let ev = self.evaluate(&x, alpha_tilde)?;
            self.warm = Some(ev.lower.clone());
            self.best.consider(&x, &ev, self.config.zeta_bar);
            self.current = Some(CurrentEval {
                eval: ev,
                zeta: self.zeta,
                rho_epoch: self.rho_epoch,
            });
        }
        Ok(())
    }

    fn flush_iteration(&mut self, success: bool, alpha: f64) {
        for mut row in self.pending.drain(..) {
            row.success = success;
            row.alpha = alpha;
            self.rows.push(row);
        }
    }

    /// Accept `x_new` (with its evaluation) as the next iterate.
    fn accept(&mut self, x_new: Vec<f64>, ev: Evaluation) {
        self.warm = Some(ev.lower.clone());
        self.best.consider(&x_new, &ev, self.config.zeta_bar);
        self.current = Some(CurrentEval {
            eval: ev,
            zeta: self.zeta,
            rho_epoch: self.rho_epoch,
        });
        self.x = x_new;
    }

    fn max_step(&self) -> f64 {
        self.steps.iter().fold(0.0_f64, |a, s| a.max(*s))
    }

    /// One outer iteration; `Ok(false)` means a stop criterion fired.
    fn iterate(&mut self) -> Result<bool> {
        let ms = self.config.variant.multi_step();
        let slot = if ms { self.stream.cyclic_position() } else { 0 };
        let alpha_tilde = self.steps[slot];
        let alpha_tilde_max = self.max_step();

        self.ensure_baseline(alpha_tilde)?;
        let d = if ms {
            self.stream.next_cyclic()
        } else {
            self.stream.next_direction()?
        };

        let zeta_k = self.zeta;
        let p_base = self.current.as_ref().expect("baseline present").eval.value;

        // poll the direction
        let (alpha, flipped, accepted): (f64, bool, Option<(Vec<f64>, Evaluation)>) =
            if self.config.variant == Variant::MsDfnNlLla {
                self.poll_no_linesearch(&d, alpha_tilde, p_base)?
            } else {
                self.poll_extrapolation(&d, alpha_tilde, p_base)?
            };

        let success = alpha > 0.0;
        let signed_d: Vec<f64> = if flipped { d.iter().map(|c| -c).collect() } else { d };

        if success {
            let (x_new, ev) = accepted.expect("successful poll carries its evaluation");
            self.steps[slot] = if self.config.variant == Variant::MsDfnNlLla {
                alpha_tilde / self.config.delta
            } else {
                alpha
            };
            self.accept(x_new, ev);
        } else {
            self.steps[slot] = self.a_min.max(self.config.theta * self.steps[slot]);
            // multi-stepsize basis regeneration: all steps below eta
            if ms && self.steps.iter().all(|s| *s < self.eta) {
                let mean = self.steps.iter().sum::<f64>() / self.steps.len() as f64;
                for s in self.steps.iter_mut() {
                    *s = mean;
                }
                self.eta *= 0.5;
                self.stream.regenerate()?;
            }
            let alpha_next = self.max_step();
            self.zeta = zeta_update(
                0.0,
                alpha_next,
                self.zeta,
                self.config.theta,
                self.config.zeta_bar,
            );
        }

        // penalty hook at the post-acceptance iterate
        let h = self.current.as_ref().expect("baseline present").eval.h.clone();
        if self.objective.end_iteration(self.k, &h, alpha, alpha_tilde) {
            self.rho_epoch += 1;
        }

        self.history.push(IterationRecord {
            k: self.k,
            direction: signed_d,
            alpha,
            alpha_tilde,
            alpha_tilde_max,
            zeta: zeta_k,
            success,
            p_value: self.current.as_ref().expect("baseline present").eval.value,
            lower_evals_cum: self.counters.lower_obj_evals,
        });
        self.flush_iteration(success, alpha);
        self.k += 1;

        // step-size stopping criterion (vacuous when zeta_bar = 0)
        if !success && self.a_min > 0.0 && self.steps.iter().all(|s| *s <= self.a_min) {
            return Ok(false);
        }
        Ok(true)
    }

    fn poll_extrapolation(
        &mut self,
        d: &[f64],
        alpha_tilde: f64,
        p_base: f64,
    ) -> Result<(f64, bool, Option<(Vec<f64>, Evaluation)>)> {
        let x = self.x.clone();
        let bounds = self.problem.x_bounds().clone();
        let (gamma, delta) = (self.config.gamma, self.config.delta);
        let mut log: Vec<(Vec<f64>, Evaluation)> = Vec::new();
        let result = {
            let mut probe = |pt: &[f64]| -> Result<f64> {
                let ev = self.evaluate(pt, alpha_tilde)?;
                let v = ev.value;
                log.push((pt.to_vec(), ev));
                Ok(v)
            };
            projected_extrapolation(&mut probe, &x, d, alpha_tilde, &bounds, gamma, delta, Some(p_base))?
        };
        if result.alpha == 0.0 {
            return Ok((0.0, result.flipped, None));
        }
        let sign = if result.flipped { -1.0 } else { 1.0 };
        let accepted_pt = trial_point(&x, d, sign * result.alpha, &bounds)?;
        let found = log
            .iter()
            .rposition(|(pt, _)| pt == &accepted_pt)
            .map(|i| log.swap_remove(i));
        let ev = match found {
            Some((_, ev)) => ev,
            // unreachable under deterministic arithmetic; re-evaluate defensively
            None => self.evaluate(&accepted_pt, alpha_tilde)?,
        };
        Ok((result.alpha, result.flipped, Some((accepted_pt, ev))))
    }

    fn poll_no_linesearch(
        &mut self,
        d: &[f64],
        alpha_tilde: f64,
        p_base: f64,
    ) -> Result<(f64, bool, Option<(Vec<f64>, Evaluation)>)> {
        let x = self.x.clone();
        let bounds = self.problem.x_bounds().clone();
        for flipped in [false, true] {
            let sign = if flipped { -1.0 } else { 1.0 };
            let pt = trial_point(&x, d, sign * alpha_tilde, &bounds)?;
            let ev = self.evaluate(&pt, alpha_tilde)?;
            let (ok, _) = accept_nl(
                ev.value,
                p_base,
                alpha_tilde,
                self.config.gamma,
                self.config.delta,
            );
            if ok {
                return Ok((alpha_tilde, flipped, Some((pt, ev))));
            }
        }
        Ok((0.0, false, None))
    }
}

/// Run the configured variant on `problem` from `x0`, composing the penalty
/// reformulation automatically when upper-level constraints are present.
///
/// All propagated evaluation errors convert the run into a
/// [`StopReason::Failure`] record carrying the partial trace.
pub fn run(
    problem: &BilevelProblem,
    oracle: &dyn LowerLevelOracle,
    config: &SolverConfig,
    x0: &[f64],
    problem_name: &str,
    clock: &dyn Clock,
) -> Result<RunResult> {
    if problem.m() > 0 {
        let mut objective = PenalizedPerturbed::new(problem.m());
        run_composed(problem, oracle, &mut objective, config, x0, problem_name, clock)
    } else {
        let mut objective = PerturbedObjective;
        run_composed(problem, oracle, &mut objective, config, x0, problem_name, clock)
    }
}

/// Like [`run`] but with a caller-supplied objective composition.
pub fn run_composed(
    problem: &BilevelProblem,
    oracle: &dyn LowerLevelOracle,
    objective: &mut dyn SolverObjective,
    config: &SolverConfig,
    x0: &[f64],
    problem_name: &str,
    clock: &dyn Clock,
) -> Result<RunResult> {
    config.validate()?;
    let x0 = project_box(x0, problem.x_bounds())?;
    let n = problem.n_x();
    let steps = if config.variant.multi_step() {
        vec![config.resolved_alpha0(); n]
    } else {
        vec![config.resolved_alpha0(); 1]
    };
    let mut driver = Driver {
        problem,
        oracle,
        objective,
        config,
        a_min: alpha_min(config.sigma, config.zeta_bar),
        x: x0.clone(),
        zeta: config.effective_zeta0(),
        steps,
        eta: config.resolved_eta0(problem.x_bounds()),
        stream: SobolDirectionStream::new(n)?,
        warm: None,
        current: None,
        rho_epoch: 0,
        counters: EvalCounters::default(),
        k: 0,
        history: Vec::new(),
        rows: Vec::new(),
        pending: Vec::new(),
        last_rho_written: None,
        best: BestTracker::new(&x0),
    };

    let stop = loop {
        driver.counters.wall_time = clock.elapsed_secs();
        if driver.counters.upper_evals >= config.max_upper_evals {
            break StopReason::EvalBudget;
        }
        if driver.counters.wall_time > config.max_wall_time {
            break StopReason::TimeBudget;
        }
        match driver.iterate() {
            Ok(true) => {}
            Ok(false) => break StopReason::StepsBelowAlphaMin,
            Err(e) => {
                driver.flush_iteration(false, 0.0);
                break StopReason::Failure(e);
            }
        }
    };
    driver.counters.wall_time = clock.elapsed_secs();

    let trace = RunTrace {
        problem: problem_name.to_string(),
        solver: config.variant.name().to_string(),
        zeta_bar: config.zeta_bar,
        n_x: problem.n_x(),
        n_y: problem.n_y(),
        rows: driver.rows,
    };
    Ok(RunResult {
        x_best: driver.best.x,
        p_best: driver.best.p,
        best_valid: driver.best.valid,
        best_upper_value: driver.best.upper_value,
        best_violation: driver.best.violation,
        best_kkt: driver.best.kkt,
        stop,
        iterations: driver.k,
        final_zeta: driver.zeta,
        counters: driver.counters,
        history: driver.history,
        trace,
    })
}
