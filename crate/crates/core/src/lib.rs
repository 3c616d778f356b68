//! Risk-sensitive nonlinear trajectory optimization.
//!
//! The crate is organised around the iterative linear exponential quadratic
//! Gaussian method:
//!
//! * [`dynsys`] holds discrete-time controlled systems, their costs, rollouts
//!   and linearizations, plus the pendulum and two-link arm benchmarks.
//! * [`leqg`] solves the linear quadratic exponential Gaussian min-max
//!   subproblem by backward dynamic programming.
//! * [`surrogate`] evaluates the Gaussian-approximation risk cost that the
//!   regularized iterations provably decrease, its truncated gradient and a
//!   dense closed-form step.
//! * [`solver`] runs the outer loops (RegILEQG and ILEQG).
//! * [`dual_cg`] is the final-state-cost fast path solving the dual of the
//!   subproblem with conjugate gradients over Jacobian-product sweeps.
//! * [`montecarlo`] estimates the true risk-sensitive cost, its gradient and
//!   the impulse-disturbance test cost.
//! * [`reference`] contains dense brute-force solvers used to cross-check
//!   the structured ones.

pub mod dual_cg;
pub mod dynsys;
pub mod leqg;
pub mod linalg;
pub mod montecarlo;
pub mod reference;
pub mod solver;
pub mod surrogate;

pub use dynsys::{
    ControlSequence, CostTerm, DynamicalSystem, Dynamics, LinearizedModel, NoiseSequence,
    QuadraticCost, StageCosts, StateTrajectory,
};
pub use leqg::{solve_leqg, LeqgError, LeqgSolution};
pub use solver::{IterateTrace, SolverConfig, StepPolicy};
