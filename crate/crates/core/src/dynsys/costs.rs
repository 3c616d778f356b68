use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{ControlSequence, DynError, StateTrajectory};
use crate::linalg;

/// A twice-differentiable convex stage cost.
pub trait SmoothCost: Send + Sync + fmt::Debug {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `1/2 x^T H x + l^T x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticCost {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Result<Self, DynError> {
        let n = linear.len();
        if hessian.shape() != (n, n) {
            return Err(DynError::Shape(format!(
                "quadratic cost: hessian {:?} does not match linear term of length {n}",
                hessian.shape()
            )));
        }
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 * hessian.amax().max(1.0) {
            return Err(DynError::InvalidCost("hessian is not symmetric".into()));
        }
        Ok(Self { hessian, linear, constant })
    }

    /// `1/2 (x - target)^T W (x - target)`.
    pub fn tracking(weight: DMatrix<f64>, target: &DVector<f64>) -> Result<Self, DynError> {
        let linear = -(&weight * target);
        let constant = 0.5 * target.dot(&(&weight * target));
        Self::new(weight, linear, constant)
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }
}

impl SmoothCost for QuadraticCost {
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hessian * x + &self.linear
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.hessian.clone()
    }
}

/// One stage's cost term.
#[derive(Debug, Clone)]
pub enum CostTerm {
    Zero,
    Quadratic(QuadraticCost),
    Smooth(Arc<dyn SmoothCost>),
}

impl CostTerm {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            CostTerm::Zero => 0.0,
            CostTerm::Quadratic(q) => q.value(x),
            CostTerm::Smooth(s) => s.value(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            CostTerm::Zero => DVector::zeros(x.len()),
            CostTerm::Quadratic(q) => q.gradient(x),
            CostTerm::Smooth(s) => s.gradient(x),
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            CostTerm::Zero => DMatrix::zeros(x.len(), x.len()),
            CostTerm::Quadratic(q) => q.hessian.clone(),
            CostTerm::Smooth(s) => s.hessian(x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, CostTerm::Zero)
    }

    pub fn is_quadratic(&self) -> bool {
        !matches!(self, CostTerm::Smooth(_))
    }
}

/// Separable costs `h(x) + g(u) = sum_{t=1}^tau h_t(x_t) + sum_{t=0}^{tau-1} g_t(u_t)`.
#[derive(Debug, Clone)]
pub struct StageCosts {
    state_dim: usize,
    control_dim: usize,
    /// `state[t - 1]` is `h_t`, for `t = 1..=tau`.
    state: Vec<CostTerm>,
    /// `control[t]` is `g_t`, for `t = 0..tau`.
    control: Vec<CostTerm>,
}

impl StageCosts {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        state: Vec<CostTerm>,
        control: Vec<CostTerm>,
    ) -> Result<Self, DynError> {
        if state.len() != control.len() || state.is_empty() {
            return Err(DynError::Shape(format!(
                "need one state and one control term per stage (got {} and {})",
                state.len(),
                control.len()
            )));
        }
        for term in &state {
            if let CostTerm::Quadratic(q) = term {
                if q.dim() != state_dim {
                    return Err(DynError::Shape("state cost dimension mismatch".into()));
                }
                if linalg::min_eigenvalue(&q.hessian) < -1e-12 * q.hessian.amax().max(1.0) {
                    return Err(DynError::InvalidCost("state cost hessian is not PSD".into()));
                }
            }
        }
        for term in &control {
            match term {
                CostTerm::Quadratic(q) => {
                    if q.dim() != control_dim {
                        return Err(DynError::Shape("control cost dimension mismatch".into()));
                    }
                    if linalg::min_eigenvalue(&q.hessian) <= 0.0 {
                        return Err(DynError::InvalidCost(
                            "control cost hessian must be positive definite".into(),
                        ));
                    }
                }
                CostTerm::Zero => {
                    return Err(DynError::InvalidCost(
                        "control costs must be strictly convex".into(),
                    ))
                }
                CostTerm::Smooth(_) => {}
            }
        }
        Ok(Self { state_dim, control_dim, state, control })
    }

    /// Cost on the last state only, with the same control cost at every stage.
    pub fn final_state(horizon: usize, terminal: QuadraticCost, control: QuadraticCost) -> Result<Self, DynError> {
        let state_dim = terminal.dim();
        let control_dim = control.dim();
        let mut state = vec![CostTerm::Zero; horizon];
        if let Some(last) = state.last_mut() {
            *last = CostTerm::Quadratic(terminal);
        }
        let control = vec![CostTerm::Quadratic(control); horizon];
        Self::new(state_dim, control_dim, state, control)
    }

    pub fn horizon(&self) -> usize {
        self.state.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// `h_t` for `t = 1..=tau`.
    pub fn state_term(&self, t: usize) -> &CostTerm {
        &self.state[t - 1]
    }

    pub fn control_term(&self, t: usize) -> &CostTerm {
        &self.control[t]
    }

    pub fn final_state_only(&self) -> bool {
        self.state[..self.state.len() - 1].iter().all(CostTerm::is_zero)
    }

    pub fn is_quadratic(&self) -> bool {
        self.state.iter().chain(&self.control).all(CostTerm::is_quadratic)
    }

    /// `h(x)`.
    pub fn state_cost(&self, traj: &StateTrajectory) -> f64 {
        self.state
            .iter()
            .enumerate()
            .map(|(i, term)| term.value(&traj.stage_owned(i)))
            .sum()
    }

    /// `g(u)`.
    pub fn control_cost(&self, u: &ControlSequence) -> f64 {
        self.control
            .iter()
            .enumerate()
            .map(|(t, term)| term.value(&u.stage_owned(t)))
            .sum()
    }

    /// Stacked gradient of `h` over `(x_1; ...; x_tau)`.
    pub fn state_gradient(&self, traj: &StateTrajectory) -> DVector<f64> {
        let parts: Vec<_> = self
            .state
            .iter()
            .enumerate()
            .map(|(i, term)| term.gradient(&traj.stage_owned(i)))
            .collect();
        linalg::stack(&parts)
    }

    /// Stacked gradient of `g`.
    pub fn control_gradient(&self, u: &ControlSequence) -> DVector<f64> {
        let parts: Vec<_> = self
            .control
            .iter()
            .enumerate()
            .map(|(t, term)| term.gradient(&u.stage_owned(t)))
            .collect();
        linalg::stack(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracking_cost_vanishes_at_target() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.2]));
        let target = DVector::from_vec(vec![std::f64::consts::PI, 0.0]);
        let q = QuadraticCost::tracking(w, &target).unwrap();
        assert!(q.value(&target).abs() < 1e-14);
        assert!(q.gradient(&target).amax() < 1e-14);
    }

    #[test]
    fn rejects_indefinite_control_cost() {
        let bad = QuadraticCost::new(DMatrix::from_element(1, 1, -1.0), DVector::zeros(1), 0.0).unwrap();
        let good = QuadraticCost::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 0.0).unwrap();
        assert!(StageCosts::final_state(3, good.clone(), bad).is_err());
        assert!(StageCosts::final_state(3, good.clone(), good).is_ok());
    }

    #[test]
    fn final_state_flag() {
        let q = QuadraticCost::new(DMatrix::identity(1, 1), DVector::zeros(1), 0.0).unwrap();
        let c = StageCosts::final_state(4, q.clone(), q.clone()).unwrap();
        assert!(c.final_state_only());
        let all = StageCosts::new(
            1,
            1,
            vec![CostTerm::Quadratic(q.clone()); 4],
            vec![CostTerm::Quadratic(q); 4],
        )
        .unwrap();
        assert!(!all.final_state_only());
    }
}
