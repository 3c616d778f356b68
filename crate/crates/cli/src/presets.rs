//! Named experiment settings.

use ileqg::solver::Algorithm;

use crate::config::{grid, ExperimentConfig, ReportedSteps, SystemKind};
use crate::CliError;

pub const DEFAULT: &str = "pendulum-fig4";
pub const NAMES: [&str; 4] = ["pendulum-fig4", "pendulum-robust", "arm-conv", "arm-robust"];
/// Base with every optional field unset; `show-config` output names it so
/// that re-reading the printed file gives back the same config.
pub const BLANK: &str = "blank";

pub fn by_name(name: &str) -> Result<ExperimentConfig, CliError> {
    match name {
        "pendulum-fig4" => Ok(pendulum_fig4()),
        "pendulum-robust" => Ok(pendulum_robust()),
        "arm-conv" => Ok(arm_conv()),
        "arm-robust" => Ok(arm_robust()),
        BLANK => Ok(ExperimentConfig::default()),
        _ => Err(CliError::Config(format!("unknown preset {name:?} (known: {})", NAMES.join(", ")))),
    }
}

/// Pendulum swing-up, theta = 4, both algorithms tuned on the grid `2^-5..2^10`
/// with a 5-iteration burn-in.
pub fn pendulum_fig4() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.solver.reported_steps = Some(ReportedSteps { regileqg: 16.0, ileqg: 0.5 });
    c
}

/// Pendulum controllers for theta in the robustness list, then kicked.
///
/// The thetas stay below the value at which the surrogate stops being
/// defined at the zero command (about 0.1 for these costs). Each test cost
/// averages 10^4 kicked runs so the standard errors are small enough to
/// separate the controllers.
pub fn pendulum_robust() -> ExperimentConfig {
    let mut c = ExperimentConfig { name: "pendulum-robust".into(), ..Default::default() };
    c.cost.lambda1 = 10.0;
    c.cost.lambda2 = 1e-3;
    c.solver.algorithms = vec![Algorithm::RegIleqg];
    c.solver.regileqg_policy = grid(-5, 5, 10);
    c.solver.max_iterations = 50;
    c.solver.reported_steps = None;
    c.risk.theta = 0.09;
    c.robustness.thetas = vec![0.0, 0.05, 0.09];
    c.robustness.simulations = 10_000;
    c.seed = 7;
    c
}

/// Two-link arm reaching, same costs and theta as the pendulum convergence run.
pub fn arm_conv() -> ExperimentConfig {
    let mut c = ExperimentConfig { name: "arm-conv".into(), ..Default::default() };
    c.system.kind = SystemKind::TwoLinkArm;
    c.solver.reported_steps = Some(ReportedSteps { regileqg: 8.0, ileqg: 0.5 });
    c
}

pub fn arm_robust() -> ExperimentConfig {
    let mut c = ExperimentConfig { name: "arm-robust".into(), ..Default::default() };
    c.system.kind = SystemKind::TwoLinkArm;
    c.cost.lambda1 = 1e-2;
    c.cost.lambda2 = 1e-3;
    c.solver.algorithms = vec![Algorithm::RegIleqg];
    c.solver.regileqg_policy = grid(-5, 5, 10);
    c.solver.max_iterations = 50;
    c.solver.reported_steps = None;
    c.risk.theta = 1.0;
    c.robustness.thetas = vec![0.0, 1.0];
    // kicks have standard deviation sigma_test / sigma0 with sigma0 about 0.01
    c.robustness.sigma_tests = vec![0.0, 0.001, 0.002, 0.005, 0.01, 0.02];
    c
}
