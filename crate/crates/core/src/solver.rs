//! Outer loops: RegILEQG (proximal steps with constant, backtracked or
//! burn-in-tuned step sizes) and ILEQG with a Monte-Carlo line search.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynsys::{ControlSequence, DynError, DynamicalSystem, LinearizedModel, StageCosts};
use crate::leqg::{solve_leqg, LeqgError};
use crate::montecarlo::{derive_seed, mc_risk_value, McError};
use crate::surrogate::{surrogate_from_model, SurrogateError, SurrogateEval};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktrackingParams {
    pub gamma0: f64,
    pub shrink: f64,
    pub grow: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub max_trials: usize,
}

impl Default for BacktrackingParams {
    fn default() -> Self {
        Self { gamma0: 1.0, shrink: 0.5, grow: 2.0, gamma_min: 2f64.powi(-20), gamma_max: 2f64.powi(20), max_trials: 40 }
    }
}

/// Step-size rule. For ILEQG the "step size" is the line-search factor `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StepPolicy {
    Constant { gamma: f64 },
    Backtracking(BacktrackingParams),
    /// Try `2^i` for each exponent during `burn_in` iterations, keep the one
    /// with the lowest surrogate value, then run with it as a constant.
    BurnInGrid { exponents: Vec<i32>, burn_in: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(rename = "regileqg")]
    RegIleqg,
    Ileqg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub theta: f64,
    pub sigma: f64,
    pub policy: StepPolicy,
    pub max_iterations: usize,
    /// Stop once the truncated-gradient norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
    /// Samples per Monte-Carlo estimate in the ILEQG line search.
    pub mc_samples: usize,
    /// Allowed increase of the Monte-Carlo cost in the ILEQG line search.
    pub line_search_slack: f64,
    /// On an infeasible subproblem, halve theta once and retry instead of stopping.
    pub retry_halve_theta: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            theta: 1.0,
            sigma: 1.0,
            policy: StepPolicy::Constant { gamma: 1.0 },
            max_iterations: 100,
            grad_tol: 1e-6,
            seed: 0,
            mc_samples: 100,
            line_search_slack: 0.0,
            retry_halve_theta: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidConfig(m));
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be >= 0, got {}", self.theta));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.grad_tol >= 0.0) {
            return bad("grad_tol must be >= 0".into());
        }
        match &self.policy {
            StepPolicy::Constant { gamma } => {
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    return bad(format!("step size must be positive, got {gamma}"));
                }
            }
            StepPolicy::Backtracking(p) => {
                if !(p.gamma_min > 0.0 && p.gamma_min <= p.gamma0 && p.gamma0 <= p.gamma_max) {
                    return bad("backtracking needs 0 < gamma_min <= gamma0 <= gamma_max".into());
                }
                if !(p.shrink > 0.0 && p.shrink < 1.0 && p.grow >= 1.0) {
                    return bad("backtracking needs 0 < shrink < 1 <= grow".into());
                }
                if p.max_trials == 0 {
                    return bad("max_trials must be positive".into());
                }
            }
            StepPolicy::BurnInGrid { exponents, .. } => {
                if exponents.is_empty() {
                    return bad("burn-in grid is empty".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("step size fell below gamma_min ({gamma:e}) after {trials} trials")]
    Stalled { gamma: f64, trials: usize },
    #[error("every burn-in grid point failed")]
    GridFailed,
    #[error(transparent)]
    Leqg(#[from] LeqgError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    MonteCarlo(#[from] McError),
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateRecord {
    pub iter: usize,
    pub controls: ControlSequence,
    /// `None` when the surrogate is undefined at this command.
    pub surrogate: Option<f64>,
    pub trunc_grad_norm: Option<f64>,
    /// Step size that produced this iterate (`None` for the start point).
    pub gamma: Option<f64>,
    pub backtracks: usize,
    pub feasible: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "reason")]
pub enum Termination {
    MaxIterations,
    Converged,
    Infeasible { stage: usize },
    Stalled,
    Diverged,
}

impl Termination {
    pub fn is_early_stop(&self) -> bool {
        matches!(self, Termination::Infeasible { .. } | Termination::Stalled | Termination::Diverged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateTrace {
    pub algorithm: Algorithm,
    pub records: Vec<IterateRecord>,
    pub termination: Termination,
    /// Step size chosen by a burn-in grid.
    pub tuned_gamma: Option<f64>,
    /// Risk parameter in effect at the end (differs from the configured one after a retry).
    pub theta: f64,
}

impl IterateTrace {
    pub fn last(&self) -> &IterateRecord {
        self.records.last().expect("trace always holds the start point")
    }

    /// Running minimum of the surrogate values (undefined entries skipped).
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.records
            .iter()
            .map(|r| {
                if let Some(v) = r.surrogate {
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
                best
            })
            .collect()
    }

    pub fn best_surrogate(&self) -> Option<f64> {
        self.best_so_far().last().copied().flatten()
    }

    /// Record with the lowest surrogate value.
    pub fn best_record(&self) -> Option<&IterateRecord> {
        self.records
            .iter()
            .filter(|r| r.surrogate.is_some())
            .min_by(|a, b| a.surrogate.unwrap().total_cmp(&b.surrogate.unwrap()))
    }

    /// Number of iterations where the surrogate went up.
    pub fn increases(&self) -> usize {
        self.records
            .windows(2)
            .filter(|w| matches!((w[0].surrogate, w[1].surrogate), (Some(a), Some(b)) if b > a))
            .count()
    }
}

/// `m(u + v; u) + 1/(2 gamma) ||v||^2` at the subproblem solution: the game
/// value `c_0` plus the constants it leaves out (log-det term, `h`, `g` at `u`).
pub fn model_bound(at_u: &SurrogateEval, subproblem_value: f64) -> f64 {
    at_u.log_det_term + at_u.nominal_cost + at_u.control_cost + subproblem_value
}

#[derive(Debug, Clone)]
pub struct AcceptedStep {
    pub next: ControlSequence,
    pub gamma: f64,
    pub trials: usize,
    pub model: LinearizedModel,
    pub surrogate: SurrogateEval,
    pub bound: f64,
}

fn relative_slack(x: f64) -> f64 {
    1e-12 * x.abs().max(1.0)
}

/// Shrink `gamma` until `f^(u+) <= m(u+; u) + 1/(2 gamma) ||u+ - u||^2`.
#[allow(clippy::too_many_arguments)]
pub fn sufficient_decrease_step(
    system: &DynamicalSystem,
    costs: &StageCosts,
    model: &LinearizedModel,
    at_u: &SurrogateEval,
    theta: f64,
    sigma: f64,
    gamma_trial: f64,
    params: &BacktrackingParams,
) -> Result<AcceptedStep, SolverError> {
    let u = &model.nominal_controls;
    let mut gamma = gamma_trial.clamp(params.gamma_min, params.gamma_max);
    for trial in 0..params.max_trials {
        let sol = solve_leqg(model, theta, sigma, 1.0 / gamma)?;
        let next = u.offset(sol.v(), 1.0);
        let bound = model_bound(at_u, sol.value);
        let candidate = system
            .linearize(costs, &next)
            .ok()
            .and_then(|m| surrogate_from_model(&m, theta, sigma, true).ok().map(|s| (m, s)));
        if let Some((m, s)) = candidate {
            if s.value <= bound + relative_slack(bound) {
                return Ok(AcceptedStep { next, gamma, trials: trial + 1, model: m, surrogate: s, bound });
            }
        }
        let shrunk = gamma * params.shrink;
        if shrunk < params.gamma_min {
            return Err(SolverError::Stalled { gamma, trials: trial + 1 });
        }
        gamma = shrunk;
    }
    Err(SolverError::Stalled { gamma, trials: params.max_trials })
}

struct Evaluated {
    model: LinearizedModel,
    surrogate: Option<SurrogateEval>,
}

fn evaluate(system: &DynamicalSystem, costs: &StageCosts, u: &ControlSequence, theta: f64, sigma: f64) -> Result<Evaluated, DynError> {
    let model = system.linearize(costs, u)?;
    let surrogate = surrogate_from_model(&model, theta, sigma, true).ok();
    Ok(Evaluated { model, surrogate })
}

fn record(iter: usize, u: &ControlSequence, ev: &Evaluated, gamma: Option<f64>, backtracks: usize, start: Instant) -> IterateRecord {
    IterateRecord {
        iter,
        controls: u.clone(),
        surrogate: ev.surrogate.as_ref().map(|s| s.value),
        trunc_grad_norm: ev.surrogate.as_ref().and_then(|s| s.gradient.as_ref()).map(|g| g.norm()),
        gamma,
        backtracks,
        feasible: true,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn converged(ev: &Evaluated, tol: f64) -> bool {
    ev.surrogate
        .as_ref()
        .and_then(|s| s.gradient.as_ref())
        .is_some_and(|g| g.norm() <= tol)
}

/// Run RegILEQG from the zero command.
pub fn run_regileqg(system: &DynamicalSystem, costs: &StageCosts, config: &SolverConfig) -> Result<IterateTrace, SolverError> {
    run_regileqg_from(system, costs, config, &system.zero_controls())
}

pub fn run_regileqg_from(
    system: &DynamicalSystem,
    costs: &StageCosts,
    config: &SolverConfig,
    u0: &ControlSequence,
) -> Result<IterateTrace, SolverError> {
    config.validate()?;
    if let StepPolicy::BurnInGrid { exponents, burn_in } = &config.policy {
        let gamma = burnin_tune(system, costs, config, Algorithm::RegIleqg, exponents, *burn_in, u0)?;
        let tuned = SolverConfig { policy: StepPolicy::Constant { gamma }, ..config.clone() };
        let mut trace = run_regileqg_from(system, costs, &tuned, u0)?;
        trace.tuned_gamma = Some(gamma);
        return Ok(trace);
    }
    let start = Instant::now();
    let mut theta = config.theta;
    let mut retried = false;
    let mut u = u0.clone();
    let mut ev = evaluate(system, costs, &u, theta, config.sigma)?;
    let mut records = vec![record(0, &u, &ev, None, 0, start)];
    let mut gamma = match &config.policy {
        StepPolicy::Constant { gamma } => *gamma,
        StepPolicy::Backtracking(p) => p.gamma0,
        StepPolicy::BurnInGrid { .. } => unreachable!(),
    };
    let mut termination = Termination::MaxIterations;
    let mut k = 0;
    while k < config.max_iterations {
        if converged(&ev, config.grad_tol) {
            termination = Termination::Converged;
            break;
        }
        let step = match &config.policy {
            StepPolicy::Backtracking(params) => match ev.surrogate.as_ref() {
                Some(at_u) => {
                    sufficient_decrease_step(system, costs, &ev.model, at_u, theta, config.sigma, gamma, params).map(|s| {
                        let first_try = s.trials == 1;
                        let used = s.gamma;
                        gamma = if first_try { (used * params.grow).min(params.gamma_max) } else { used };
                        (s.next, Evaluated { model: s.model, surrogate: Some(s.surrogate) }, used, s.trials - 1)
                    })
                }
                None => Err(SolverError::Surrogate(SurrogateError::ConditionViolated)),
            },
            _ => solve_leqg(&ev.model, theta, config.sigma, 1.0 / gamma)
                .map_err(SolverError::from)
                .and_then(|sol| {
                    let next = u.offset(sol.v(), 1.0);
                    let next_ev = evaluate(system, costs, &next, theta, config.sigma)?;
                    Ok((next, next_ev, gamma, 0))
                }),
        };
        match step {
            Ok((next, next_ev, used, backtracks)) => {
                u = next;
                ev = next_ev;
                k += 1;
                records.push(record(k, &u, &ev, Some(used), backtracks, start));
            }
            Err(SolverError::Leqg(LeqgError::Infeasible { stage })) => {
                if config.retry_halve_theta && !retried {
                    retried = true;
                    theta *= 0.5;
                    ev = evaluate(system, costs, &u, theta, config.sigma)?;
                    continue;
                }
                if let Some(r) = records.last_mut() {
                    r.feasible = false;
                }
                termination = Termination::Infeasible { stage };
                break;
            }
            Err(SolverError::Stalled { .. }) | Err(SolverError::Surrogate(SurrogateError::ConditionViolated)) => {
                termination = Termination::Stalled;
                break;
            }
            Err(SolverError::Dynamics(DynError::Diverged { .. })) => {
                termination = Termination::Diverged;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if termination == Termination::MaxIterations && converged(&ev, config.grad_tol) {
        termination = Termination::Converged;
    }
    Ok(IterateTrace { algorithm: Algorithm::RegIleqg, records, termination, tuned_gamma: None, theta })
}

/// Run ILEQG (no proximal term, Monte-Carlo line search) from the zero command.
pub fn run_ileqg(system: &DynamicalSystem, costs: &StageCosts, config: &SolverConfig) -> Result<IterateTrace, SolverError> {
    run_ileqg_from(system, costs, config, &system.zero_controls())
}

pub fn run_ileqg_from(
    system: &DynamicalSystem,
    costs: &StageCosts,
    config: &SolverConfig,
    u0: &ControlSequence,
) -> Result<IterateTrace, SolverError> {
    config.validate()?;
    if let StepPolicy::BurnInGrid { exponents, burn_in } = &config.policy {
        let alpha = burnin_tune(system, costs, config, Algorithm::Ileqg, exponents, *burn_in, u0)?;
        let tuned = SolverConfig { policy: StepPolicy::Constant { gamma: alpha }, ..config.clone() };
        let mut trace = run_ileqg_from(system, costs, &tuned, u0)?;
        trace.tuned_gamma = Some(alpha);
        return Ok(trace);
    }
    let start = Instant::now();
    let mut theta = config.theta;
    let mut retried = false;
    let mut u = u0.clone();
    let mut ev = evaluate(system, costs, &u, theta, config.sigma)?;
    let mut records = vec![record(0, &u, &ev, None, 0, start)];
    let mut termination = Termination::MaxIterations;
    let mut k = 0;
    while k < config.max_iterations {
        if converged(&ev, config.grad_tol) {
            termination = Termination::Converged;
            break;
        }
        let sol = match solve_leqg(&ev.model, theta, config.sigma, 0.0) {
            Ok(sol) => sol,
            Err(LeqgError::Infeasible { stage }) => {
                if config.retry_halve_theta && !retried {
                    retried = true;
                    theta *= 0.5;
                    ev = evaluate(system, costs, &u, theta, config.sigma)?;
                    continue;
                }
                if let Some(r) = records.last_mut() {
                    r.feasible = false;
                }
                termination = Termination::Infeasible { stage };
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let direction = sol.v();
        let (alpha, backtracks) = match &config.policy {
            StepPolicy::Constant { gamma } => (*gamma, 0),
            StepPolicy::Backtracking(params) => {
                match mc_line_search(system, costs, &u, direction, theta, config, params, derive_seed(config.seed, k as u64)) {
                    Some(found) => found,
                    None => {
                        termination = Termination::Stalled;
                        break;
                    }
                }
            }
            StepPolicy::BurnInGrid { .. } => unreachable!(),
        };
        let next = u.offset(direction, alpha);
        match evaluate(system, costs, &next, theta, config.sigma) {
            Ok(next_ev) => {
                u = next;
                ev = next_ev;
                k += 1;
                records.push(record(k, &u, &ev, Some(alpha), backtracks, start));
            }
            Err(DynError::Diverged { .. }) => {
                termination = Termination::Diverged;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if termination == Termination::MaxIterations && converged(&ev, config.grad_tol) {
        termination = Termination::Converged;
    }
    Ok(IterateTrace { algorithm: Algorithm::Ileqg, records, termination, tuned_gamma: None, theta })
}

/// Backtracking on the Monte-Carlo risk cost with common random numbers.
/// Returns `(alpha, rejected trials)`, or `None` if no trial decreased the cost.
#[allow(clippy::too_many_arguments)]
fn mc_line_search(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    direction: &DVector<f64>,
    theta: f64,
    config: &SolverConfig,
    params: &BacktrackingParams,
    seed: u64,
) -> Option<(f64, usize)> {
    let n = config.mc_samples.max(1);
    let base = mc_risk_value(system, costs, u, theta, config.sigma, n, seed).ok()?.value;
    let mut alpha = params.gamma0;
    for trial in 0..params.max_trials {
        let cand = u.offset(direction, alpha);
        if let Ok(est) = mc_risk_value(system, costs, &cand, theta, config.sigma, n, seed) {
            if est.value <= base + config.line_search_slack {
                return Some((alpha, trial));
            }
        }
        alpha *= params.shrink;
        if alpha < params.gamma_min {
            return None;
        }
    }
    None
}

/// Pick the grid step size whose burn-in run reaches the lowest surrogate
/// value. Grid points run in parallel; ties go to the first exponent.
pub fn burnin_tune(
    system: &DynamicalSystem,
    costs: &StageCosts,
    config: &SolverConfig,
    algorithm: Algorithm,
    exponents: &[i32],
    burn_in: usize,
    u0: &ControlSequence,
) -> Result<f64, SolverError> {
    if exponents.is_empty() {
        return Err(SolverError::InvalidConfig("burn-in grid is empty".into()));
    }
    let scores: Vec<Option<f64>> = exponents
        .par_iter()
        .map(|&i| {
            let gamma = 2f64.powi(i);
            let cfg = SolverConfig { policy: StepPolicy::Constant { gamma }, max_iterations: burn_in, ..config.clone() };
            let trace = match algorithm {
                Algorithm::RegIleqg => run_regileqg_from(system, costs, &cfg, u0),
                Algorithm::Ileqg => run_ileqg_from(system, costs, &cfg, u0),
            };
            trace.ok().and_then(|t| t.best_surrogate())
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for (&i, score) in exponents.iter().zip(scores) {
        if let Some(s) = score {
            if best.is_none_or(|(b, _)| s < b) {
                best = Some((s, 2f64.powi(i)));
            }
        }
    }
    best.map(|(_, g)| g).ok_or(SolverError::GridFailed)
}

/// Dispatch on the algorithm.
pub fn run(system: &DynamicalSystem, costs: &StageCosts, config: &SolverConfig, algorithm: Algorithm) -> Result<IterateTrace, SolverError> {
    match algorithm {
        Algorithm::RegIleqg => run_regileqg(system, costs, config),
        Algorithm::Ileqg => run_ileqg(system, costs, config),
    }
}
