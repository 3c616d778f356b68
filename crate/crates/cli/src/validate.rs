//! Self-check: the structured solvers against dense and independent
//! references on seeded random instances.

use std::fmt;

use ileqg::dual_cg::dual_step_from_model;
use ileqg::leqg::solve_leqg;
use ileqg::linalg::rel_err;
use ileqg::montecarlo::mc_risk_value;
use ileqg::reference::{
    dense_saddle, open_loop_curvature, quadrature_surrogate, random_linear_problem, random_model, riccati_lqr,
    InstanceShape,
};
use ileqg::surrogate::{reg_step_from_model, surrogate_from_model, surrogate_value};
use ileqg::LinearizedModel;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Signature of the dynamic-programming step `(model, theta, sigma, 1/gamma) -> v`.
pub type StepFn = fn(&LinearizedModel, f64, f64, f64) -> Result<DVector<f64>, String>;

fn dp_step(m: &LinearizedModel, theta: f64, sigma: f64, prox: f64) -> Result<DVector<f64>, String> {
    solve_leqg(m, theta, sigma, prox).map(|s| s.v().clone()).map_err(|e| e.to_string())
}

/// Replaceable pieces, so that a broken recursion can be shown to be caught.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub dp_step: StepFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Self { dp_step }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    pub tolerance: f64,
    /// Worst error over the instances (infinite when a solver failed).
    pub observed: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} instances={:<4} tolerance={:.1e} worst={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.tolerance,
            self.observed
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

fn check(name: &'static str, tolerance: f64, errors: impl IntoIterator<Item = f64>) -> Check {
    let mut instances = 0;
    let mut worst = 0.0f64;
    for e in errors {
        instances += 1;
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Check { name, instances, tolerance, observed: worst, passed: instances > 0 && worst <= tolerance }
}

fn shape(rng: &mut ChaCha8Rng, max_tau: usize, max_dim: usize, final_state_only: bool) -> InstanceShape {
    let d = rng.random_range(1..=max_dim);
    let p = rng.random_range(1..=max_dim);
    InstanceShape {
        horizon: rng.random_range(1..=max_tau),
        state_dim: d,
        control_dim: p,
        noise_dim: if final_state_only { p } else { rng.random_range(1..=max_dim) },
        final_state_only,
        additive: final_state_only,
    }
}

/// Theta strictly inside the open-loop feasible range.
fn feasible_theta(rng: &mut ChaCha8Rng, m: &LinearizedModel) -> f64 {
    rng.random_range(0.05..0.9) / open_loop_curvature(m).max(1e-9)
}

pub fn run(seed: u64, hooks: &Hooks) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let errs: Vec<f64> = (0..50)
        .map(|_| {
            let s = shape(&mut rng, 8, 3, false);
            let m = random_model(&mut rng, &s);
            let theta = feasible_theta(&mut rng, &m);
            let prox = rng.random_range(0.0..2.0);
            match ((hooks.dp_step)(&m, theta, 1.0, prox), reg_step_from_model(&m, theta, 1.0, prox)) {
                (Ok(a), Ok(b)) => rel_err(&a, &b),
                _ => f64::INFINITY,
            }
        })
        .collect();
    checks.push(check("dp_step_vs_dense_step", 1e-6, errs));

    let mut calls = Vec::new();
    let errs: Vec<f64> = (0..50)
        .map(|_| {
            let s = shape(&mut rng, 10, 4, true);
            let m = random_model(&mut rng, &s);
            let theta = feasible_theta(&mut rng, &m);
            let prox = rng.random_range(0.0..2.0);
            match ((hooks.dp_step)(&m, theta, 1.0, prox), dual_step_from_model(&m, theta, 1.0, prox)) {
                (Ok(a), Ok(b)) => {
                    calls.push(b.oracle_calls as f64 / (10 * s.state_dim + 1) as f64);
                    rel_err(&a, &b.v)
                }
                _ => f64::INFINITY,
            }
        })
        .collect();
    checks.push(check("dp_step_vs_dual_cg", 1e-6, errs));
    checks.push(check("dual_calls_per_10d_plus_1", 1.0, calls));

    let errs: Vec<f64> = (0..50)
        .map(|_| {
            let s = shape(&mut rng, 5, 3, false);
            let m = random_model(&mut rng, &s);
            let theta = feasible_theta(&mut rng, &m);
            let prox = rng.random_range(0.0..2.0);
            let Some((v, _, value)) = dense_saddle(&m, theta, 1.0, prox) else { return f64::INFINITY };
            let dp = solve_leqg(&m, theta, 1.0, prox).map_err(|e| e.to_string());
            match ((hooks.dp_step)(&m, theta, 1.0, prox), dp) {
                (Ok(a), Ok(sol)) => rel_err(&a, &v).max((sol.value - value).abs() / value.abs().max(1.0)),
                _ => f64::INFINITY,
            }
        })
        .collect();
    checks.push(check("dp_vs_dense_saddle", 1e-8, errs));

    let errs: Vec<f64> = (0..50)
        .map(|_| {
            let s = shape(&mut rng, 20, 4, false);
            let m = random_model(&mut rng, &s);
            let prox = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.01..2.0) };
            match ((hooks.dp_step)(&m, 1e-15, 1.0, prox), riccati_lqr(&m, prox)) {
                (Ok(a), Some((b, _))) => rel_err(&a, &b),
                _ => f64::INFINITY,
            }
        })
        .collect();
    checks.push(check("risk_neutral_vs_lqr", 1e-8, errs));

    let errs: Vec<f64> = (0..30)
        .map(|_| {
            let s = InstanceShape { horizon: rng.random_range(1..=2), state_dim: 1, control_dim: 1, noise_dim: 1, final_state_only: false, additive: false };
            let m = random_model(&mut rng, &s);
            let sigma = rng.random_range(0.3..1.5);
            let theta = feasible_theta(&mut rng, &m) / (sigma * sigma);
            let closed = surrogate_from_model(&m, theta, sigma, false).map(|e| e.value);
            match (closed, quadrature_surrogate(&m, theta, sigma, 1201)) {
                (Ok(a), Some(b)) => (a - b).abs() / b.abs().max(1.0),
                _ => f64::INFINITY,
            }
        })
        .collect();
    checks.push(check("surrogate_vs_quadrature", 1e-8, errs));

    // error in standard errors
    let errs: Vec<f64> = (0..3)
        .map(|_| {
            let s = InstanceShape { horizon: 4, state_dim: 2, control_dim: 2, noise_dim: 2, final_state_only: false, additive: true };
            let (system, costs) = random_linear_problem(&mut rng, &s);
            let u = ileqg::ControlSequence::new(DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0)), 2).unwrap();
            let Ok(m) = system.linearize(&costs, &u) else { return f64::INFINITY };
            let theta = 0.3 / open_loop_curvature(&m).max(1e-9);
            let sur = surrogate_value(&system, &costs, &u, theta, 1.0);
            let mc = mc_risk_value(&system, &costs, &u, theta, 1.0, 20_000, rng.random());
            match (sur, mc) {
                (Ok(a), Ok(b)) => (a.value - b.value).abs() / b.std_error.max(1e-300),
                _ => f64::INFINITY,
            }
        })
        .collect();
    checks.push(check("surrogate_vs_mc_in_se", 3.0, errs));

    Report { checks }
}
