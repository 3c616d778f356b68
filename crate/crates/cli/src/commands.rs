//! The `solve`, `approx-compare` and `robustness` experiments.

use std::path::{Path, PathBuf};

use ileqg::montecarlo::{derive_seed, mc_risk_gradient, mc_risk_value, mean_and_se, test_cost, TestCostOptions};
use ileqg::solver::{run, Algorithm, IterateTrace, SolverConfig, SolverError, Termination};
use ileqg::surrogate::{surrogate_from_model, SurrogateEval};
use ileqg::{ControlSequence, DynamicalSystem, StageCosts};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MonteCarloConfig, Selection, SystemKind};
use crate::output::{float, opt_float, write_atomic, write_json, Csv};
use crate::CliError;

pub const TRACE_COLUMNS: [&str; 10] = [
    "iter",
    "surrogate_value",
    "mc_value",
    "mc_stderr",
    "trunc_grad_norm",
    "mc_grad_norm",
    "gamma",
    "backtracks",
    "feasible",
    "wall_ms",
];
pub const BEST_COLUMNS: [&str; 2] = ["iter", "best_surrogate_value"];
pub const APPROX_COLUMNS: [&str; 8] = [
    "iter",
    "surrogate_value",
    "surrogate_grad_norm",
    "mc_value",
    "mc_value_se",
    "mc_grad_norm",
    "mc_grad_norm_se",
    "mc_diverged",
];
pub const ROBUSTNESS_COLUMNS: [&str; 8] =
    ["theta", "sigma_test", "mean_test_cost", "std_error", "simulations", "diverged", "tuned_step", "selected_iter"];

/// Seed streams derived from the experiment seed.
const MC_STREAM: u64 = 1;
const TEST_STREAM: u64 = 1000;

pub fn algorithm_slug(a: Algorithm) -> &'static str {
    match a {
        Algorithm::RegIleqg => "regileqg",
        Algorithm::Ileqg => "ileqg",
    }
}

/// Outcome of one solver run: a trace, or the reason none was produced.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Finished,
    EarlyStop,
    Failed,
}

fn status_of(result: &Result<IterateTrace, SolverError>) -> RunStatus {
    match result {
        Ok(t) if t.termination.is_early_stop() => RunStatus::EarlyStop,
        Ok(_) => RunStatus::Finished,
        Err(_) => RunStatus::Failed,
    }
}

/// Monte-Carlo summary at one command: mean over `runs` estimates and the
/// standard error of that mean (the single estimate's own error for one run).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct McColumns {
    pub value: Option<f64>,
    pub value_se: Option<f64>,
    pub grad_norm: Option<f64>,
    pub grad_norm_se: Option<f64>,
    pub diverged: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn mc_columns(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
    mc: &MonteCarloConfig,
    seed: u64,
) -> McColumns {
    let mut values = Vec::new();
    let mut single_se = None;
    let mut norms = Vec::new();
    let mut diverged = 0;
    for r in 0..mc.runs {
        let s = derive_seed(seed, r as u64);
        if let Ok(est) = mc_risk_value(system, costs, u, theta, sigma, mc.samples, s) {
            values.push(est.value);
            single_se = Some(est.std_error);
            diverged += est.diverged;
        } else {
            diverged += mc.samples;
        }
        if let Ok(g) = mc_risk_gradient(system, costs, u, theta, sigma, mc.samples, s) {
            norms.push(g.gradient.norm());
        }
    }
    let summarize = |xs: &[f64], fallback: Option<f64>| -> (Option<f64>, Option<f64>) {
        match xs.len() {
            0 => (None, None),
            1 => (Some(xs[0]), fallback),
            _ => {
                let (m, se) = mean_and_se(xs);
                (Some(m), Some(se))
            }
        }
    };
    let (value, value_se) = summarize(&values, single_se);
    let (grad_norm, grad_norm_se) = summarize(&norms, None);
    McColumns { value, value_se, grad_norm, grad_norm_se, diverged }
}

fn dir_file(cfg: &ExperimentConfig, suffix: &str) -> PathBuf {
    cfg.output.dir.join(format!("{}_{suffix}", cfg.name))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IteratesFile {
    pub algorithm: Algorithm,
    pub theta: f64,
    pub control_dim: usize,
    pub iterates: Vec<Vec<f64>>,
}

impl IteratesFile {
    pub fn from_trace(trace: &IterateTrace) -> Self {
        Self {
            algorithm: trace.algorithm,
            theta: trace.theta,
            control_dim: trace.records[0].controls.stage_dim(),
            iterates: trace.records.iter().map(|r| r.controls.as_vector().iter().copied().collect()).collect(),
        }
    }

    pub fn controls(&self, system: &DynamicalSystem) -> Result<Vec<ControlSequence>, CliError> {
        let len = system.horizon() * system.control_dim();
        if self.control_dim != system.control_dim() {
            return Err(CliError::Config(format!(
                "iterates have control dimension {}, the system needs {}",
                self.control_dim,
                system.control_dim()
            )));
        }
        self.iterates
            .iter()
            .enumerate()
            .map(|(k, u)| {
                if u.len() != len || u.iter().any(|x| !x.is_finite()) {
                    return Err(CliError::Config(format!("iterate {k} has {} finite entries, expected {len}", u.len())));
                }
                ControlSequence::new(nalgebra::DVector::from_column_slice(u), self.control_dim)
                    .map_err(|e| CliError::Config(e.to_string()))
            })
            .collect()
    }
}

/// File names, relative to the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunFiles {
    pub trace: PathBuf,
    pub best: PathBuf,
    pub iterates: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub status: RunStatus,
    pub termination: Option<Termination>,
    pub error: Option<String>,
    pub iterations: usize,
    /// Step size picked by the burn-in grid.
    pub tuned_step: Option<f64>,
    /// Step size quoted for comparison (from `solver.reported_steps`).
    pub reported_step: Option<f64>,
    pub theta: f64,
    pub initial_surrogate: Option<f64>,
    pub final_surrogate: Option<f64>,
    pub best_surrogate: Option<f64>,
    pub best_iter: Option<usize>,
    pub surrogate_increases: usize,
    pub files: Option<RunFiles>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub schema_version: u32,
    pub name: String,
    pub system: SystemKind,
    pub seed: u64,
    pub horizon: usize,
    pub theta: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub summary: SolveSummary,
    pub traces: Vec<(Algorithm, Result<IterateTrace, SolverError>)>,
    pub summary_path: PathBuf,
}

impl SolveOutcome {
    pub fn early_stop(&self) -> bool {
        self.summary.runs.iter().any(|r| !matches!(r.status, RunStatus::Finished))
    }

    pub fn trace(&self, algorithm: Algorithm) -> Option<&IterateTrace> {
        self.traces.iter().find(|(a, _)| *a == algorithm).and_then(|(_, t)| t.as_ref().ok())
    }
}

/// Per-iteration CSV of a trace.
pub fn trace_csv(
    cfg: &ExperimentConfig,
    system: &DynamicalSystem,
    costs: &StageCosts,
    trace: &IterateTrace,
) -> Csv {
    let mut csv = Csv::new(&TRACE_COLUMNS);
    let (sigma, mc_seed) = (cfg.sigma(), derive_seed(cfg.seed, MC_STREAM));
    let columns: Vec<McColumns> = if cfg.monte_carlo.evaluate_iterates {
        trace
            .records
            .iter()
            .map(|r| mc_columns(system, costs, &r.controls, trace.theta, sigma, &cfg.monte_carlo, mc_seed))
            .collect()
    } else {
        vec![McColumns::default(); trace.records.len()]
    };
    for (r, m) in trace.records.iter().zip(columns) {
        csv.row(&[
            r.iter.to_string(),
            opt_float(r.surrogate),
            opt_float(m.value),
            opt_float(m.value_se),
            opt_float(r.trunc_grad_norm),
            opt_float(m.grad_norm),
            opt_float(r.gamma),
            r.backtracks.to_string(),
            r.feasible.to_string(),
            if cfg.output.record_wall_time { float(r.wall_ms) } else { String::new() },
        ]);
    }
    csv
}

pub fn best_csv(trace: &IterateTrace) -> Csv {
    let mut csv = Csv::new(&BEST_COLUMNS);
    for (r, b) in trace.records.iter().zip(trace.best_so_far()) {
        csv.row(&[r.iter.to_string(), opt_float(b)]);
    }
    csv
}

fn run_summary(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    result: &Result<IterateTrace, SolverError>,
    files: Option<RunFiles>,
) -> RunSummary {
    let reported_step = cfg.solver.reported_steps.map(|r| match algorithm {
        Algorithm::RegIleqg => r.regileqg,
        Algorithm::Ileqg => r.ileqg,
    });
    let mut s = RunSummary {
        algorithm,
        status: status_of(result),
        termination: None,
        error: None,
        iterations: 0,
        tuned_step: None,
        reported_step,
        theta: cfg.risk.theta,
        initial_surrogate: None,
        final_surrogate: None,
        best_surrogate: None,
        best_iter: None,
        surrogate_increases: 0,
        files,
    };
    match result {
        Ok(t) => {
            s.termination = Some(t.termination.clone());
            s.iterations = t.last().iter;
            s.tuned_step = t.tuned_gamma;
            s.theta = t.theta;
            s.initial_surrogate = t.records[0].surrogate;
            s.final_surrogate = t.last().surrogate;
            s.best_surrogate = t.best_surrogate();
            s.best_iter = t.best_record().map(|r| r.iter);
            s.surrogate_increases = t.increases();
        }
        Err(e) => s.error = Some(e.to_string()),
    }
    s
}

pub fn solve(cfg: &ExperimentConfig) -> Result<SolveOutcome, CliError> {
    cfg.validate()?;
    let system = cfg.system()?;
    let costs = cfg.costs()?;
    let mut traces = Vec::new();
    let mut runs = Vec::new();
    for &algorithm in &cfg.solver.algorithms {
        let result = run(&system, &costs, &cfg.solver_config(algorithm, cfg.risk.theta), algorithm);
        let files = match &result {
            Ok(trace) => {
                let slug = algorithm_slug(algorithm);
                let name = |suffix: &str| PathBuf::from(format!("{}_{slug}{suffix}", cfg.name));
                let files = RunFiles { trace: name(".csv"), best: name("_best.csv"), iterates: name("_iterates.json") };
                let dir = &cfg.output.dir;
                write_atomic(&dir.join(&files.trace), trace_csv(cfg, &system, &costs, trace).as_str().as_bytes())?;
                write_atomic(&dir.join(&files.best), best_csv(trace).as_str().as_bytes())?;
                write_json(&dir.join(&files.iterates), &IteratesFile::from_trace(trace))?;
                Some(files)
            }
            Err(_) => None,
        };
        runs.push(run_summary(cfg, algorithm, &result, files));
        traces.push((algorithm, result));
    }
    let summary = SolveSummary {
        schema_version: crate::config::SCHEMA_VERSION,
        name: cfg.name.clone(),
        system: cfg.system.kind,
        seed: cfg.seed,
        horizon: cfg.system.horizon,
        theta: cfg.risk.theta,
        sigma: cfg.sigma(),
        sigma0: cfg.sigma0(),
        runs,
    };
    let summary_path = dir_file(cfg, "summary.json");
    write_json(&summary_path, &summary)?;
    Ok(SolveOutcome { summary, traces, summary_path })
}

/// Surrogate and Monte-Carlo value/gradient norm at each command.
pub fn approx_compare_csv(
    system: &DynamicalSystem,
    costs: &StageCosts,
    iterates: &[ControlSequence],
    theta: f64,
    sigma: f64,
    mc: &MonteCarloConfig,
    seed: u64,
) -> Csv {
    let mut csv = Csv::new(&APPROX_COLUMNS);
    let rows: Vec<(Option<SurrogateEval>, McColumns)> = iterates
        .iter()
        .map(|u| {
            let sur = system.linearize(costs, u).ok().and_then(|m| surrogate_from_model(&m, theta, sigma, true).ok());
            (sur, mc_columns(system, costs, u, theta, sigma, mc, seed))
        })
        .collect();
    for (k, (sur, m)) in rows.into_iter().enumerate() {
        csv.row(&[
            k.to_string(),
            opt_float(sur.as_ref().map(|s| s.value)),
            opt_float(sur.as_ref().and_then(|s| s.gradient.as_ref()).map(|g| g.norm())),
            opt_float(m.value),
            opt_float(m.value_se),
            opt_float(m.grad_norm),
            opt_float(m.grad_norm_se),
            m.diverged.to_string(),
        ]);
    }
    csv
}

#[derive(Debug, Clone)]
pub struct ApproxOutcome {
    pub csv_path: PathBuf,
    pub csv: Csv,
    pub early_stop: bool,
}

/// Compare along the iterates in `iterates_path`, or along a fresh RegILEQG
/// run of the config when no file is given.
pub fn approx_compare(cfg: &ExperimentConfig, iterates_path: Option<&Path>) -> Result<ApproxOutcome, CliError> {
    cfg.validate()?;
    let system = cfg.system()?;
    let costs = cfg.costs()?;
    let (iterates, theta, early_stop) = match iterates_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            let file: IteratesFile =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            (file.controls(&system)?, file.theta, false)
        }
        None => {
            let result = run(&system, &costs, &cfg.solver_config(Algorithm::RegIleqg, cfg.risk.theta), Algorithm::RegIleqg);
            match result {
                Ok(t) => (
                    t.records.iter().map(|r| r.controls.clone()).collect(),
                    t.theta,
                    t.termination.is_early_stop(),
                ),
                Err(e) => {
                    eprintln!("warning: solver failed ({e}); comparing nothing");
                    (Vec::new(), cfg.risk.theta, true)
                }
            }
        }
    };
    let csv = approx_compare_csv(&system, &costs, &iterates, theta, cfg.sigma(), &cfg.monte_carlo, derive_seed(cfg.seed, MC_STREAM));
    let csv_path = dir_file(cfg, "approx.csv");
    write_atomic(&csv_path, csv.as_str().as_bytes())?;
    Ok(ApproxOutcome { csv_path, csv, early_stop })
}

#[derive(Debug, Clone, Serialize)]
pub struct ControllerSummary {
    pub theta: f64,
    pub status: RunStatus,
    pub termination: Option<Termination>,
    pub error: Option<String>,
    pub tuned_step: Option<f64>,
    pub selected_iter: Option<usize>,
    pub selected_surrogate: Option<f64>,
    /// State cost of the undisturbed trajectory.
    pub noiseless_cost: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    pub theta: f64,
    pub sigma_test: f64,
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
    pub simulations: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessOutcome {
    pub controllers: Vec<ControllerSummary>,
    pub rows: Vec<RobustnessRow>,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

impl RobustnessOutcome {
    pub fn early_stop(&self) -> bool {
        self.controllers.iter().any(|c| !matches!(c.status, RunStatus::Finished))
    }

    pub fn row(&self, theta: f64, sigma_test: f64) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.theta == theta && r.sigma_test == sigma_test)
    }
}

fn select(trace: &IterateTrace, selection: Selection) -> &ileqg::solver::IterateRecord {
    match selection {
        Selection::BestSurrogate => trace.best_record().unwrap_or_else(|| trace.last()),
        Selection::Last => trace.last(),
    }
}

/// Tune and optimize one controller per theta, then kick each one at every
/// `sigma_test`. All controllers see the same kicks at a given `sigma_test`.
pub fn robustness(cfg: &ExperimentConfig) -> Result<RobustnessOutcome, CliError> {
    cfg.validate()?;
    let system = cfg.system()?;
    let costs = cfg.costs()?;
    let r = &cfg.robustness;
    let results: Vec<Result<IterateTrace, SolverError>> = r
        .thetas
        .par_iter()
        .map(|&theta| {
            let config = SolverConfig { policy: r.policy.clone(), max_iterations: r.max_iterations, ..cfg.solver_config(Algorithm::RegIleqg, theta) };
            run(&system, &costs, &config, Algorithm::RegIleqg)
        })
        .collect();
    let opts = TestCostOptions { sigma0: cfg.sigma0(), scale: r.kick_scale, stage: r.kick_stage };
    let mut controllers = Vec::new();
    let mut rows = Vec::new();
    let mut csv = Csv::new(&ROBUSTNESS_COLUMNS);
    for (&theta, result) in r.thetas.iter().zip(&results) {
        let chosen = result.as_ref().ok().map(|t| select(t, r.selection));
        controllers.push(ControllerSummary {
            theta,
            status: status_of(result),
            termination: result.as_ref().ok().map(|t| t.termination.clone()),
            error: result.as_ref().err().map(|e| e.to_string()),
            tuned_step: result.as_ref().ok().and_then(|t| t.tuned_gamma),
            selected_iter: chosen.map(|c| c.iter),
            selected_surrogate: chosen.and_then(|c| c.surrogate),
            noiseless_cost: chosen.and_then(|c| system.rollout(&c.controls, None).ok().map(|x| costs.state_cost(&x))),
        });
        for (j, &sigma_test) in r.sigma_tests.iter().enumerate() {
            let tc = chosen.and_then(|c| {
                test_cost(&system, &costs, &c.controls, sigma_test, r.simulations, derive_seed(cfg.seed, TEST_STREAM + j as u64), &opts)
                    .ok()
            });
            let row = RobustnessRow {
                theta,
                sigma_test,
                mean: tc.as_ref().map(|t| t.mean),
                std_error: tc.as_ref().map(|t| t.std_error),
                simulations: tc.as_ref().map_or(0, |t| t.simulations),
                diverged: tc.as_ref().map_or(0, |t| t.diverged),
            };
            csv.row(&[
                float(theta),
                float(sigma_test),
                opt_float(row.mean),
                opt_float(row.std_error),
                row.simulations.to_string(),
                row.diverged.to_string(),
                opt_float(result.as_ref().ok().and_then(|t| t.tuned_gamma)),
                chosen.map(|c| c.iter.to_string()).unwrap_or_default(),
            ]);
            rows.push(row);
        }
    }
    let csv_path = dir_file(cfg, "robustness.csv");
    let summary_path = dir_file(cfg, "robustness_summary.json");
    write_atomic(&csv_path, csv.as_str().as_bytes())?;
    let outcome = RobustnessOutcome { controllers, rows, csv_path, summary_path };
    write_json(&outcome.summary_path, &outcome)?;
    Ok(outcome)
}
