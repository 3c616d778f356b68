//! Experiment configuration: a TOML tree with a schema version, validated in
//! full before anything runs. Every experiment starts from a named preset;
//! a config file only lists the fields it changes.

use std::path::{Path, PathBuf};

use ileqg::dynsys::systems::{
    pendulum_costs, pendulum_system, two_link_arm_costs, two_link_arm_system, ArmParams, PendulumParams,
};
use ileqg::montecarlo::{KickScale, KickStage};
use ileqg::solver::{Algorithm, SolverConfig};
use ileqg::{DynamicalSystem, StageCosts, StepPolicy};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::presets;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Pendulum,
    TwoLinkArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub kind: SystemKind,
    /// Total time `T`; the step is `T / horizon`.
    pub duration: f64,
    pub horizon: usize,
    /// Defaults to the zero state (pendulum hanging down, arm stretched out at rest).
    pub initial_state: Option<Vec<f64>>,
    pub pendulum: PendulumParams,
    pub arm: ArmParams,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            kind: SystemKind::Pendulum,
            duration: 5.0,
            horizon: 100,
            initial_state: None,
            pendulum: PendulumParams::default(),
            arm: ArmParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// Weight of the final velocity.
    pub lambda1: f64,
    /// Weight of the controls.
    pub lambda2: f64,
    /// Multiply the control cost by the time step.
    pub scale_by_dt: bool,
    /// Arm joint angles to reach (ignored by the pendulum, whose target is upright).
    pub target: [f64; 2],
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.01, scale_by_dt: true, target: [std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2] }
    }
}

/// Step sizes to quote next to the tuned ones in the solve summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportedSteps {
    pub regileqg: f64,
    pub ileqg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub algorithms: Vec<Algorithm>,
    pub regileqg_policy: StepPolicy,
    pub ileqg_policy: StepPolicy,
    pub max_iterations: usize,
    pub grad_tol: f64,
    /// Samples per estimate in the ILEQG Monte-Carlo line search.
    pub line_search_samples: usize,
    pub line_search_slack: f64,
    pub retry_halve_theta: bool,
    pub reported_steps: Option<ReportedSteps>,
}

pub fn grid(lo: i32, hi: i32, burn_in: usize) -> StepPolicy {
    StepPolicy::BurnInGrid { exponents: (lo..=hi).collect(), burn_in }
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::RegIleqg, Algorithm::Ileqg],
            regileqg_policy: grid(-5, 10, 5),
            ileqg_policy: grid(-5, 10, 5),
            max_iterations: 100,
            grad_tol: 0.0,
            line_search_samples: 100,
            line_search_slack: 0.0,
            retry_halve_theta: false,
            reported_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub theta: f64,
    /// Noise normalization. Unset: 1 for the pendulum, `1/||M^-1||` at the
    /// initial joint angles for the arm.
    pub sigma0: Option<f64>,
    /// Noise standard deviation of the risk cost. Unset: `sigma0`.
    pub sigma: Option<f64>,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self { theta: 4.0, sigma0: None, sigma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Samples per estimate.
    pub samples: usize,
    /// Independent estimates per iterate.
    pub runs: usize,
    /// Add Monte-Carlo columns to the solve traces.
    pub evaluate_iterates: bool,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { samples: 100, runs: 10, evaluate_iterates: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Iterate with the lowest surrogate value.
    BestSurrogate,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub thetas: Vec<f64>,
    pub sigma_tests: Vec<f64>,
    /// Kicked simulations per (controller, sigma_test).
    pub simulations: usize,
    pub kick_scale: KickScale,
    pub kick_stage: KickStage,
    pub policy: StepPolicy,
    pub max_iterations: usize,
    pub selection: Selection,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            thetas: vec![0.0, 0.05, 0.09],
            sigma_tests: vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            simulations: 100,
            kick_scale: KickScale::Normalized,
            kick_stage: KickStage::Uniform,
            policy: grid(-5, 5, 10),
            max_iterations: 50,
            selection: Selection::BestSurrogate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Fill the `wall_ms` column. Off by default so that reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("results"), record_wall_time: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub system: SystemConfig,
    pub cost: CostConfig,
    pub solver: SolverSection,
    pub risk: RiskConfig,
    pub monte_carlo: MonteCarloConfig,
    pub robustness: RobustnessConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "pendulum-fig4".into(),
            seed: 0,
            system: SystemConfig::default(),
            cost: CostConfig::default(),
            solver: SolverSection::default(),
            risk: RiskConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            robustness: RobustnessConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn finite_nonneg(name: &str, x: f64) -> Result<(), CliError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and >= 0, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn dt(&self) -> f64 {
        self.system.duration / self.system.horizon as f64
    }

    pub fn state_dim(&self) -> usize {
        match self.system.kind {
            SystemKind::Pendulum => 2,
            SystemKind::TwoLinkArm => 4,
        }
    }

    pub fn initial_state(&self) -> DVector<f64> {
        match &self.system.initial_state {
            Some(x) => DVector::from_column_slice(x),
            None => DVector::zeros(self.state_dim()),
        }
    }

    pub fn sigma0(&self) -> f64 {
        self.risk.sigma0.unwrap_or_else(|| match self.system.kind {
            SystemKind::Pendulum => 1.0,
            SystemKind::TwoLinkArm => self.system.arm.noise_scale(self.initial_state()[1]),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.risk.sigma.unwrap_or_else(|| self.sigma0())
    }

    /// Check every field; nothing is computed on a config that fails here.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(invalid(format!("name {:?} must be non-empty and use only [A-Za-z0-9-_.]", self.name)));
        }
        let sys = &self.system;
        if sys.horizon == 0 {
            return Err(invalid("system.horizon must be positive"));
        }
        if !(sys.duration > 0.0 && sys.duration.is_finite()) {
            return Err(invalid(format!("system.duration must be positive, got {}", sys.duration)));
        }
        if let Some(x) = &sys.initial_state {
            if x.len() != self.state_dim() {
                return Err(invalid(format!("system.initial_state has {} entries, expected {}", x.len(), self.state_dim())));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(invalid("system.initial_state must be finite"));
            }
        }
        match sys.kind {
            SystemKind::Pendulum => sys.pendulum.validate().map_err(|e| invalid(e.to_string()))?,
            SystemKind::TwoLinkArm => sys.arm.validate().map_err(|e| invalid(e.to_string()))?,
        }
        finite_nonneg("cost.lambda1", self.cost.lambda1)?;
        finite_nonneg("cost.lambda2", self.cost.lambda2)?;
        if self.cost.lambda2 == 0.0 {
            return Err(invalid("cost.lambda2 must be positive (the control cost has to be strictly convex)"));
        }
        if self.cost.target.iter().any(|v| !v.is_finite()) {
            return Err(invalid("cost.target must be finite"));
        }

        finite_nonneg("risk.theta", self.risk.theta)?;
        for (name, v) in [("risk.sigma0", self.risk.sigma0), ("risk.sigma", self.risk.sigma)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(invalid(format!("{name} must be positive, got {v}")));
                }
            }
        }

        let s = &self.solver;
        if s.algorithms.is_empty() {
            return Err(invalid("solver.algorithms is empty"));
        }
        for (i, a) in s.algorithms.iter().enumerate() {
            if s.algorithms[..i].contains(a) {
                return Err(invalid(format!("solver.algorithms lists {a:?} twice")));
            }
        }
        if s.line_search_samples == 0 {
            return Err(invalid("solver.line_search_samples must be positive"));
        }
        finite_nonneg("solver.line_search_slack", s.line_search_slack)?;
        for a in [Algorithm::RegIleqg, Algorithm::Ileqg] {
            self.solver_config(a, self.risk.theta).validate().map_err(|e| invalid(format!("solver ({a:?}): {e}")))?;
        }
        if let Some(r) = s.reported_steps {
            if !(r.regileqg > 0.0 && r.ileqg > 0.0) {
                return Err(invalid("solver.reported_steps must be positive"));
            }
        }

        let mc = &self.monte_carlo;
        if mc.samples == 0 || mc.runs == 0 {
            return Err(invalid("monte_carlo.samples and monte_carlo.runs must be positive"));
        }

        let r = &self.robustness;
        if r.thetas.is_empty() || r.sigma_tests.is_empty() {
            return Err(invalid("robustness.thetas and robustness.sigma_tests must be non-empty"));
        }
        for &t in &r.thetas {
            finite_nonneg("robustness.thetas entry", t)?;
        }
        for &t in &r.sigma_tests {
            finite_nonneg("robustness.sigma_tests entry", t)?;
        }
        if r.simulations == 0 {
            return Err(invalid("robustness.simulations must be positive"));
        }
        if let KickStage::Fixed(t) = r.kick_stage {
            if t >= sys.horizon {
                return Err(invalid(format!("robustness.kick_stage {t} is outside the horizon {}", sys.horizon)));
            }
        }
        let rc = SolverConfig { policy: r.policy.clone(), max_iterations: r.max_iterations, ..self.solver_config(Algorithm::RegIleqg, 0.0) };
        rc.validate().map_err(|e| invalid(format!("robustness: {e}")))?;

        if self.output.dir.as_os_str().is_empty() {
            return Err(invalid("output.dir is empty"));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<DynamicalSystem, CliError> {
        let (dt, tau, x0) = (self.dt(), self.system.horizon, self.initial_state());
        let sys = match self.system.kind {
            SystemKind::Pendulum => pendulum_system(self.system.pendulum, dt, tau, x0),
            SystemKind::TwoLinkArm => two_link_arm_system(self.system.arm, dt, tau, x0),
        };
        sys.map_err(|e| invalid(e.to_string()))
    }

    pub fn costs(&self) -> Result<StageCosts, CliError> {
        let c = &self.cost;
        let (dt, tau) = (self.dt(), self.system.horizon);
        let costs = match self.system.kind {
            SystemKind::Pendulum => pendulum_costs(c.lambda1, c.lambda2, dt, tau, c.scale_by_dt),
            SystemKind::TwoLinkArm => two_link_arm_costs(c.target, c.lambda1, c.lambda2, dt, tau, c.scale_by_dt),
        };
        costs.map_err(|e| invalid(e.to_string()))
    }

    pub fn policy(&self, algorithm: Algorithm) -> &StepPolicy {
        match algorithm {
            Algorithm::RegIleqg => &self.solver.regileqg_policy,
            Algorithm::Ileqg => &self.solver.ileqg_policy,
        }
    }

    pub fn solver_config(&self, algorithm: Algorithm, theta: f64) -> SolverConfig {
        SolverConfig {
            theta,
            sigma: self.sigma(),
            policy: self.policy(algorithm).clone(),
            max_iterations: self.solver.max_iterations,
            grad_tol: self.solver.grad_tol,
            seed: self.seed,
            mc_samples: self.solver.line_search_samples,
            line_search_slack: self.solver.line_search_slack,
            retry_halve_theta: self.solver.retry_halve_theta,
        }
    }

    pub fn to_toml(&self) -> String {
        format!("preset = \"{}\"\n{}", presets::BLANK, toml::to_string(self).expect("config serializes"))
    }
}

/// Overlay `top` onto `base`, table by table.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse a config text. The optional top-level `preset` key names the base
/// (default `pendulum-fig4`); `preset_override` wins over it.
pub fn parse(text: &str, preset_override: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let mut top: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
    let named = match top.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => return Err(invalid(format!("preset must be a string, got {other}"))),
        None => None,
    };
    let base_name = preset_override.map(str::to_string).or(named).unwrap_or_else(|| presets::DEFAULT.to_string());
    let base = presets::by_name(&base_name)?;
    let mut table = toml::Table::try_from(&base).expect("config serializes");
    merge(&mut table, top);
    let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve `--config` / `--preset` into a validated config.
pub fn load(path: Option<&Path>, preset: Option<&str>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("cannot read {}: {e}", p.display())))?;
            parse(&text, preset)
        }
        None => {
            let cfg = presets::by_name(preset.unwrap_or(presets::DEFAULT))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}
