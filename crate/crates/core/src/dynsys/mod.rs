//! Discrete-time controlled systems `x_{t+1} = psi_t(x_t, u_t, w_t)`, their
//! costs, noiseless rollouts and linearizations along a nominal command.

mod costs;
mod sequence;
pub mod systems;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use costs::{CostTerm, QuadraticCost, SmoothCost, StageCosts};
pub use sequence::{ControlSequence, NoiseSequence, StateTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynError {
    #[error("trajectory diverged: state x_{stage} is not finite")]
    Diverged { stage: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid cost: {0}")]
    InvalidCost(String),
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("model error: {0}")]
    Model(String),
}

/// Jacobians of one step with respect to state, control and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct StepJacobians {
    /// `d psi / d x`, d x d.
    pub dx: DMatrix<f64>,
    /// `d psi / d u`, d x p.
    pub du: DMatrix<f64>,
    /// `d psi / d w`, d x q.
    pub dw: DMatrix<f64>,
}

/// One-step transition map. Implementors that only provide [`Dynamics::step`]
/// get central finite-difference Jacobians.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// True when `psi_t(x, u, w) = phi_t(x, u + w)`.
    fn additive_noise(&self) -> bool {
        false
    }

    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;

    fn jacobians(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> StepJacobians {
        finite_difference_jacobians(self, t, x, u, w)
    }
}

/// Central differences with step `1e-6 * max(1, |arg|_inf)` per argument.
pub fn finite_difference_jacobians<D: Dynamics + ?Sized>(
    dynamics: &D,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> StepJacobians {
    fn partial(
        arg: &DVector<f64>,
        rows: usize,
        eval: impl Fn(&DVector<f64>) -> DVector<f64>,
    ) -> DMatrix<f64> {
        let h = 1e-6 * arg.amax().max(1.0);
        let mut jac = DMatrix::zeros(rows, arg.len());
        let mut probe = arg.clone();
        for j in 0..arg.len() {
            probe[j] = arg[j] + h;
            let plus = eval(&probe);
            probe[j] = arg[j] - h;
            let minus = eval(&probe);
            probe[j] = arg[j];
            jac.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        jac
    }
    let d = dynamics.state_dim();
    StepJacobians {
        dx: partial(x, d, |xp| dynamics.step(t, xp, u, w)),
        du: partial(u, d, |up| dynamics.step(t, x, up, w)),
        dw: partial(w, d, |wp| dynamics.step(t, x, u, wp)),
    }
}

/// A controlled system over a fixed horizon from a fixed initial state.
#[derive(Debug, Clone)]
pub struct DynamicalSystem {
    dynamics: Arc<dyn Dynamics>,
    horizon: usize,
    initial_state: DVector<f64>,
}

impl DynamicalSystem {
    pub fn new(dynamics: Arc<dyn Dynamics>, horizon: usize, initial_state: DVector<f64>) -> Result<Self, DynError> {
        if horizon == 0 {
            return Err(DynError::InvalidSystem("horizon must be at least one stage".into()));
        }
        if initial_state.len() != dynamics.state_dim() {
            return Err(DynError::Shape(format!(
                "initial state has length {}, system state dimension is {}",
                initial_state.len(),
                dynamics.state_dim()
            )));
        }
        if dynamics.additive_noise() && dynamics.noise_dim() != dynamics.control_dim() {
            return Err(DynError::InvalidSystem("additive noise requires noise_dim == control_dim".into()));
        }
        Ok(Self { dynamics, horizon, initial_state })
    }

    pub fn dynamics(&self) -> &Arc<dyn Dynamics> {
        &self.dynamics
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.initial_state
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.dynamics.noise_dim()
    }

    pub fn additive_noise(&self) -> bool {
        self.dynamics.additive_noise()
    }

    pub fn zero_controls(&self) -> ControlSequence {
        ControlSequence::zeros(self.horizon, self.control_dim())
    }

    fn check_controls(&self, u: &ControlSequence) -> Result<(), DynError> {
        if u.stage_dim() != self.control_dim() || u.stages() != self.horizon {
            return Err(DynError::Shape(format!(
                "command has {} stages of dimension {}, expected {} of dimension {}",
                u.stages(),
                u.stage_dim(),
                self.horizon,
                self.control_dim()
            )));
        }
        Ok(())
    }

    /// States `x_1..x_tau` under command `u` and noise `w` (zero when `None`).
    pub fn rollout(&self, u: &ControlSequence, w: Option<&NoiseSequence>) -> Result<StateTrajectory, DynError> {
        self.check_controls(u)?;
        if let Some(w) = w {
            if w.stage_dim() != self.noise_dim() || w.stages() != self.horizon {
                return Err(DynError::Shape("noise sequence does not match the system".into()));
            }
        }
        let zero_w = DVector::zeros(self.noise_dim());
        let mut states = Vec::with_capacity(self.horizon);
        let mut x = self.initial_state.clone();
        for t in 0..self.horizon {
            let wt = w.map(|w| w.stage_owned(t)).unwrap_or_else(|| zero_w.clone());
            x = self.dynamics.step(t, &x, &u.stage_owned(t), &wt);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DynError::Diverged { stage: t + 1 });
            }
            states.push(x.clone());
        }
        StateTrajectory::new(crate::linalg::stack(&states), self.state_dim())
    }

    /// `h(x~(u, w))` and its gradient with respect to `u` by one adjoint sweep
    /// along the (possibly noisy) trajectory.
    pub fn state_cost_gradient(
        &self,
        costs: &StageCosts,
        u: &ControlSequence,
        w: Option<&NoiseSequence>,
    ) -> Result<(f64, DVector<f64>), DynError> {
        let traj = self.rollout(u, w)?;
        let (tau, p) = (self.horizon, self.control_dim());
        let zero_w = DVector::zeros(self.noise_dim());
        let mut grad = DVector::zeros(tau * p);
        let mut lambda = costs.state_term(tau).gradient(&traj.stage_owned(tau - 1));
        for t in (0..tau).rev() {
            let x = if t == 0 { self.initial_state.clone() } else { traj.stage_owned(t - 1) };
            let wt = w.map(|w| w.stage_owned(t)).unwrap_or_else(|| zero_w.clone());
            let jac = self.dynamics.jacobians(t, &x, &u.stage_owned(t), &wt);
            grad.rows_mut(t * p, p).copy_from(&(jac.du.transpose() * &lambda));
            lambda = jac.dx.transpose() * lambda;
            if t > 0 {
                lambda += costs.state_term(t).gradient(&x);
            }
        }
        Ok((costs.state_cost(&traj), grad))
    }

    /// Jacobians and cost derivatives along the noiseless rollout of `u`.
    pub fn linearize(&self, costs: &StageCosts, u: &ControlSequence) -> Result<LinearizedModel, DynError> {
        if costs.horizon() != self.horizon
            || costs.state_dim() != self.state_dim()
            || costs.control_dim() != self.control_dim()
        {
            return Err(DynError::Shape("costs do not match the system".into()));
        }
        if u.as_vector().iter().any(|v| !v.is_finite()) {
            return Err(DynError::Shape("command is not finite".into()));
        }
        let traj = self.rollout(u, None)?;
        let (d, p) = (self.state_dim(), self.control_dim());
        let zero_w = DVector::zeros(self.noise_dim());
        let mut a = Vec::with_capacity(self.horizon);
        let mut b = Vec::with_capacity(self.horizon);
        let mut c = Vec::with_capacity(self.horizon);
        let mut state_hessians = vec![DMatrix::zeros(d, d)];
        let mut state_gradients = vec![DVector::zeros(d)];
        let mut control_hessians = Vec::with_capacity(self.horizon);
        let mut control_gradients = Vec::with_capacity(self.horizon);
        let mut x = self.initial_state.clone();
        for t in 0..self.horizon {
            let ut = u.stage_owned(t);
            let jac = self.dynamics.jacobians(t, &x, &ut, &zero_w);
            a.push(jac.dx);
            b.push(jac.du);
            c.push(jac.dw);
            let term = costs.control_term(t);
            control_hessians.push(term.hessian(&ut));
            control_gradients.push(term.gradient(&ut));
            x = traj.stage_owned(t);
            let term = costs.state_term(t + 1);
            state_hessians.push(term.hessian(&x));
            state_gradients.push(term.gradient(&x));
        }
        debug_assert_eq!(control_gradients.first().map(|g| g.len()), Some(p));
        Ok(LinearizedModel {
            a,
            b,
            c,
            state_hessians,
            state_gradients,
            control_hessians,
            control_gradients,
            state_cost: costs.state_cost(&traj),
            control_cost: costs.control_cost(u),
            quadratic_costs: costs.is_quadratic(),
            nominal_controls: u.clone(),
            nominal_states: traj,
            initial_state: self.initial_state.clone(),
        })
    }
}

/// Linear-quadratic model of the problem around a nominal command.
///
/// `state_hessians[t]` / `state_gradients[t]` hold `H_t`, `h~_t` for
/// `t = 0..=tau`; stage 0 is the fixed initial state and is always zero.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub state_hessians: Vec<DMatrix<f64>>,
    pub state_gradients: Vec<DVector<f64>>,
    pub control_hessians: Vec<DMatrix<f64>>,
    pub control_gradients: Vec<DVector<f64>>,
    /// `h(x)` along the nominal trajectory.
    pub state_cost: f64,
    /// `g(u)` at the nominal command.
    pub control_cost: f64,
    pub quadratic_costs: bool,
    pub nominal_controls: ControlSequence,
    pub nominal_states: StateTrajectory,
    pub initial_state: DVector<f64>,
}

impl LinearizedModel {
    /// Build a model directly from stage matrices (nominal point at the origin).
    ///
    /// `state_hessians` and `state_gradients` cover `t = 1..=tau`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        state_hessians: Vec<DMatrix<f64>>,
        state_gradients: Vec<DVector<f64>>,
        control_hessians: Vec<DMatrix<f64>>,
        control_gradients: Vec<DVector<f64>>,
    ) -> Result<Self, DynError> {
        let tau = a.len();
        if tau == 0 {
            return Err(DynError::InvalidSystem("empty horizon".into()));
        }
        let d = a[0].nrows();
        let p = b[0].ncols();
        let q = c[0].ncols();
        let lens = [b.len(), c.len(), state_hessians.len(), state_gradients.len(), control_hessians.len(), control_gradients.len()];
        if lens.iter().any(|&l| l != tau) {
            return Err(DynError::Shape(format!("stage counts differ: tau = {tau}, others {lens:?}")));
        }
        for t in 0..tau {
            let ok = a[t].shape() == (d, d)
                && b[t].shape() == (d, p)
                && c[t].shape() == (d, q)
                && state_hessians[t].shape() == (d, d)
                && state_gradients[t].len() == d
                && control_hessians[t].shape() == (p, p)
                && control_gradients[t].len() == p;
            if !ok {
                return Err(DynError::Shape(format!("inconsistent matrix shapes at stage {t}")));
            }
        }
        let mut hs = vec![DMatrix::zeros(d, d)];
        hs.extend(state_hessians);
        let mut hg = vec![DVector::zeros(d)];
        hg.extend(state_gradients);
        Ok(Self {
            a,
            b,
            c,
            state_hessians: hs,
            state_gradients: hg,
            control_hessians,
            control_gradients,
            state_cost: 0.0,
            control_cost: 0.0,
            quadratic_costs: true,
            nominal_controls: ControlSequence::zeros(tau, p),
            nominal_states: StateTrajectory::zeros(tau, d),
            initial_state: DVector::zeros(d),
        })
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.c[0].ncols()
    }

    /// True when only `H_tau`, `h~_tau` are nonzero.
    pub fn final_state_only(&self) -> bool {
        let tau = self.horizon();
        (1..tau).all(|t| self.state_hessians[t].amax() == 0.0 && self.state_gradients[t].amax() == 0.0)
    }

    /// Linearized dynamics `y_{t+1} = A_t y_t + B_t v_t + C_t w_t` from `y0`.
    /// Returns `(y_1; ...; y_tau)`.
    pub fn propagate(&self, v: &DVector<f64>, w: Option<&DVector<f64>>, y0: &DVector<f64>) -> DVector<f64> {
        let (tau, d, p, q) = (self.horizon(), self.state_dim(), self.control_dim(), self.noise_dim());
        let mut out = DVector::zeros(tau * d);
        let mut y = y0.clone();
        for t in 0..tau {
            let mut next = &self.a[t] * &y + &self.b[t] * v.rows(t * p, p);
            if let Some(w) = w {
                next += &self.c[t] * w.rows(t * q, q);
            }
            out.rows_mut(t * d, d).copy_from(&next);
            y = next;
        }
        out
    }

    /// Block-diagonal `H = diag(H_1, ..., H_tau)`.
    pub fn stacked_state_hessian(&self) -> DMatrix<f64> {
        crate::linalg::block_diag(&self.state_hessians[1..])
    }

    /// `(h~_1; ...; h~_tau)`.
    pub fn stacked_state_gradient(&self) -> DVector<f64> {
        crate::linalg::stack(&self.state_gradients[1..])
    }

    pub fn stacked_control_hessian(&self) -> DMatrix<f64> {
        crate::linalg::block_diag(&self.control_hessians)
    }

    pub fn stacked_control_gradient(&self) -> DVector<f64> {
        crate::linalg::stack(&self.control_gradients)
    }
}

fn propagation_jacobian(a: &[DMatrix<f64>], inputs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let tau = a.len();
    let d = a[0].nrows();
    let m = inputs[0].ncols();
    let mut x = DMatrix::zeros(tau * m, tau * d);
    for s in 0..tau {
        // dx_{t+1}/d input_s for t = s, s+1, ...
        let mut block = inputs[s].clone();
        x.view_mut((s * m, s * d), (m, d)).copy_from(&block.transpose());
        for t in (s + 1)..tau {
            block = &a[t] * block;
            x.view_mut((s * m, t * d), (m, d)).copy_from(&block.transpose());
        }
    }
    x
}

/// Command Jacobian `X = grad x~(u)`, shape `(tau p) x (tau d)`.
///
/// Row block `s`, column block `t - 1` holds `(d x_t / d u_s)^T`, which is
/// zero unless `s < t`.
pub fn trajectory_jacobian(model: &LinearizedModel) -> DMatrix<f64> {
    propagation_jacobian(&model.a, &model.b)
}

/// Noise Jacobian, `(tau q) x (tau d)`; equals [`trajectory_jacobian`] for
/// additive-noise systems.
pub fn noise_jacobian(model: &LinearizedModel) -> DMatrix<f64> {
    propagation_jacobian(&model.a, &model.c)
}

#[cfg(test)]
mod tests {
    use super::systems::{FnDynamics, LinearDynamics};
    use super::*;

    fn scalar_integrator() -> DynamicalSystem {
        let dyn_ = FnDynamics::new(1, 1, 1, true, |_t, x, u, w| x + u + w);
        DynamicalSystem::new(Arc::new(dyn_), 2, DVector::zeros(1)).unwrap()
    }

    #[test]
    fn identity_dynamics_stay_put() {
        let dyn_ = FnDynamics::new(2, 1, 1, false, |_t, x, _u, _w| x.clone());
        let x0 = DVector::from_vec(vec![0.3, -1.2]);
        let sys = DynamicalSystem::new(Arc::new(dyn_), 5, x0.clone()).unwrap();
        let u = ControlSequence::new(DVector::from_vec(vec![1.0, -4.0, 2.0, 0.5, 9.0]), 1).unwrap();
        let traj = sys.rollout(&u, None).unwrap();
        for t in 0..5 {
            assert_eq!(traj.stage_owned(t), x0);
        }
    }

    #[test]
    fn telescoping_sum() {
        let sys = scalar_integrator();
        let u = ControlSequence::new(DVector::from_vec(vec![1.0, 1.0]), 1).unwrap();
        let traj = sys.rollout(&u, None).unwrap();
        assert_eq!(traj.as_vector().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn diverged_reports_first_bad_stage() {
        let dyn_ = FnDynamics::new(1, 1, 1, false, |t, x, _u, _w| {
            if t == 2 {
                DVector::from_element(1, f64::NAN)
            } else {
                x.clone()
            }
        });
        let sys = DynamicalSystem::new(Arc::new(dyn_), 4, DVector::zeros(1)).unwrap();
        let err = sys.rollout(&sys.zero_controls(), None).unwrap_err();
        assert_eq!(err, DynError::Diverged { stage: 3 });
    }

    #[test]
    fn zero_horizon_rejected() {
        let dyn_ = FnDynamics::new(1, 1, 1, true, |_t, x, u, w| x + u + w);
        assert!(DynamicalSystem::new(Arc::new(dyn_), 0, DVector::zeros(1)).is_err());
    }

    #[test]
    fn linear_system_linearizes_to_itself() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let c = DMatrix::from_row_slice(2, 1, &[0.1, 0.3]);
        let lin = LinearDynamics::time_invariant(a.clone(), b.clone(), c.clone());
        let sys = DynamicalSystem::new(Arc::new(lin), 3, DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let h = QuadraticCost::new(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![0.5, -1.0]), 0.0).unwrap();
        let g = QuadraticCost::new(DMatrix::identity(1, 1) * 0.3, DVector::from_vec(vec![0.2]), 0.0).unwrap();
        let costs = StageCosts::new(
            2,
            1,
            vec![CostTerm::Quadratic(h.clone()); 3],
            vec![CostTerm::Quadratic(g.clone()); 3],
        )
        .unwrap();
        let u = ControlSequence::new(DVector::from_vec(vec![0.4, -0.7, 1.1]), 1).unwrap();
        let model = sys.linearize(&costs, &u).unwrap();
        let traj = sys.rollout(&u, None).unwrap();
        for t in 0..3 {
            assert!((&model.a[t] - &a).amax() < 1e-9);
            assert!((&model.b[t] - &b).amax() < 1e-9);
            assert!((&model.c[t] - &c).amax() < 1e-9);
            assert_eq!(model.state_hessians[t + 1], h.hessian);
            let expected = &h.hessian * traj.stage_owned(t) + &h.linear;
            assert!((&model.state_gradients[t + 1] - expected).amax() < 1e-12);
            assert_eq!(model.control_hessians[t], g.hessian);
        }
        assert_eq!(model.state_hessians[0], DMatrix::zeros(2, 2));
    }

    #[test]
    fn single_stage_jacobian_is_b_transpose() {
        let b = DMatrix::from_row_slice(2, 1, &[0.3, -0.4]);
        let model = LinearizedModel::from_matrices(
            vec![DMatrix::identity(2, 2)],
            vec![b.clone()],
            vec![b.clone()],
            vec![DMatrix::identity(2, 2)],
            vec![DVector::zeros(2)],
            vec![DMatrix::identity(1, 1)],
            vec![DVector::zeros(1)],
        )
        .unwrap();
        assert_eq!(trajectory_jacobian(&model), b.transpose());
    }

    #[test]
    fn scalar_unit_jacobian_is_triangular_ones() {
        let one = || DMatrix::identity(1, 1);
        let model = LinearizedModel::from_matrices(
            vec![one(), one(), one()],
            vec![one(), one(), one()],
            vec![one(), one(), one()],
            vec![one(), one(), one()],
            vec![DVector::zeros(1); 3],
            vec![one(), one(), one()],
            vec![DVector::zeros(1); 3],
        )
        .unwrap();
        let x = trajectory_jacobian(&model);
        // dx_t/du_s = 1 for s < t; column j holds x_{j+1}.
        for s in 0..3 {
            for j in 0..3 {
                let expected = if s <= j { 1.0 } else { 0.0 };
                assert_eq!(x[(s, j)], expected, "s={s} j={j}");
            }
        }
    }
}
