//! Matrix-free step for final-state costs.
//!
//! With `F_u`, `F_w` the Jacobians of the final state with respect to the
//! command and the noise, the subproblem is solved through its dual
//!
//! ```text
//! min_z  1/2 (z - h~)' H^{-1} (z - h~) + q_g*(-F_u' z) - s/2 ||F_w' z||^2,
//! ```
//!
//! `s = theta sigma^2`, `q_g*` the conjugate of the regularized control
//! quadratic, by conjugate gradients. Only Jacobian-vector products through the
//! stored stage Jacobians are used, so the cost is `O(tau d^2)` per product.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynsys::{ControlSequence, DynError, DynamicalSystem, LinearizedModel, StageCosts};
use crate::linalg::{factor_pd, symmetrize, PD_REL_MARGIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error("dual problem is not convex: H^-1 - theta sigma^2 F_w F_w' is not positive definite")]
    Infeasible,
    #[error("dual path needs final-state costs with a positive definite terminal Hessian")]
    Unsupported,
    #[error("conjugate gradients broke down (non-positive curvature {curvature:e})")]
    Breakdown { curvature: f64 },
    #[error("conjugate gradients did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

/// Products with the final-state Jacobians, counted per sweep.
#[derive(Debug)]
pub struct JacobianOracle<'a> {
    model: &'a LinearizedModel,
    calls: Cell<usize>,
}

impl<'a> JacobianOracle<'a> {
    pub fn new(model: &'a LinearizedModel) -> Self {
        Self { model, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    fn tick(&self) {
        self.calls.set(self.calls.get() + 1);
    }

    fn forward(&self, v: Option<&DVector<f64>>, w: Option<&DVector<f64>>) -> DVector<f64> {
        let m = self.model;
        let (p, q) = (m.control_dim(), m.noise_dim());
        let mut y = DVector::zeros(m.state_dim());
        for t in 0..m.horizon() {
            let mut next = &m.a[t] * &y;
            if let Some(v) = v {
                next += &m.b[t] * v.rows(t * p, p);
            }
            if let Some(w) = w {
                next += &m.c[t] * w.rows(t * q, q);
            }
            y = next;
        }
        y
    }

    fn backward(&self, z: &DVector<f64>, want_u: bool, want_w: bool) -> (DVector<f64>, DVector<f64>) {
        let m = self.model;
        let (tau, p, q) = (m.horizon(), m.control_dim(), m.noise_dim());
        let mut gu = DVector::zeros(if want_u { tau * p } else { 0 });
        let mut gw = DVector::zeros(if want_w { tau * q } else { 0 });
        let mut lambda = z.clone();
        for t in (0..tau).rev() {
            if want_u {
                gu.rows_mut(t * p, p).copy_from(&(m.b[t].transpose() * &lambda));
            }
            if want_w {
                gw.rows_mut(t * q, q).copy_from(&(m.c[t].transpose() * &lambda));
            }
            lambda = m.a[t].transpose() * lambda;
        }
        (gu, gw)
    }

    /// `F_u v`.
    pub fn jvp_u(&self, v: &DVector<f64>) -> DVector<f64> {
        self.tick();
        self.forward(Some(v), None)
    }

    /// `F_w w`.
    pub fn jvp_w(&self, w: &DVector<f64>) -> DVector<f64> {
        self.tick();
        self.forward(None, Some(w))
    }

    /// `F_u' z`.
    pub fn vjp_u(&self, z: &DVector<f64>) -> DVector<f64> {
        self.tick();
        self.backward(z, true, false).0
    }

    /// `F_w' z`.
    pub fn vjp_w(&self, z: &DVector<f64>) -> DVector<f64> {
        self.tick();
        self.backward(z, false, true).1
    }

    /// `F_u v + F_w w` in one sweep.
    pub fn jvp_joint(&self, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.tick();
        self.forward(Some(v), Some(w))
    }

    /// `(F_u' z, F_w' z)` in one sweep.
    pub fn vjp_joint(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        self.tick();
        self.backward(z, true, true)
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub solution: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Conjugate gradients for `A x = b` from `x = 0`. Stops when
/// `||A x - b|| <= tol ||b||` or after `max_iter` iterations.
pub fn conjgrad<F>(mut matvec: F, rhs: &DVector<f64>, tol: f64, max_iter: usize) -> Result<CgResult, DualError>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let bnorm = rhs.norm();
    let mut x = DVector::zeros(rhs.len());
    if bnorm == 0.0 {
        return Ok(CgResult { solution: x, iterations: 0, residual_norm: 0.0 });
    }
    let target = tol * bnorm;
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut iterations = 0;
    while iterations < max_iter && rr.sqrt() > target {
        let ap = matvec(&p);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            return Err(DualError::Breakdown { curvature });
        }
        let alpha = rr / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_next = r.dot(&r);
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
        iterations += 1;
    }
    let residual_norm = rr.sqrt();
    if residual_norm > target {
        return Err(DualError::NotConverged { iterations, residual: residual_norm / bnorm });
    }
    Ok(CgResult { solution: x, iterations, residual_norm })
}

#[derive(Debug, Clone)]
pub struct DualStep {
    /// Command update `v`, so that `u+ = u + v`.
    pub v: DVector<f64>,
    /// Dual optimum `z*`.
    pub z: DVector<f64>,
    pub oracle_calls: usize,
    pub cg_iterations: usize,
}

pub const CG_TOL: f64 = 1e-10;

/// Dual step on a linearized final-state-cost model. `prox_weight` is `1/gamma`.
pub fn dual_step_from_model(model: &LinearizedModel, theta: f64, sigma: f64, prox_weight: f64) -> Result<DualStep, DualError> {
    if !(theta >= 0.0 && sigma >= 0.0 && prox_weight >= 0.0) || !(theta * sigma * sigma).is_finite() {
        return Err(DualError::InvalidParameter(format!("theta = {theta}, sigma = {sigma}, 1/gamma = {prox_weight}")));
    }
    if !model.final_state_only() {
        return Err(DualError::Unsupported);
    }
    let tau = model.horizon();
    let d = model.state_dim();
    let p = model.control_dim();
    let s = theta * sigma * sigma;
    let h = &model.state_hessians[tau];
    let h_chol = factor_pd(h, h.amax(), PD_REL_MARGIN).ok_or(DualError::Unsupported)?;
    let h_grad = &model.state_gradients[tau];

    let q_chols = model
        .control_hessians
        .iter()
        .map(|g| {
            let q = g + DMatrix::identity(p, p) * prox_weight;
            q.cholesky().ok_or_else(|| DualError::InvalidParameter("control Hessian is not positive definite".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let q_solve = |x: &DVector<f64>| {
        let mut out = DVector::zeros(x.len());
        for (t, ch) in q_chols.iter().enumerate() {
            out.rows_mut(t * p, p).copy_from(&ch.solve(&x.rows(t * p, p).clone_owned()));
        }
        out
    };
    let g_grad = model.stacked_control_gradient();
    let oracle = JacobianOracle::new(model);

    // Hessian of r(z) = q_h*(z) - s/2 ||F_w' z||^2, one column at a time.
    if s > 0.0 {
        let mut hess = h_chol.inverse();
        for i in 0..d {
            let e = DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 });
            let col = oracle.jvp_w(&oracle.vjp_w(&e));
            hess.set_column(i, &(hess.column(i) - col * s));
        }
        symmetrize(&mut hess);
        let scale = hess.diagonal().amax();
        if factor_pd(&hess, scale, PD_REL_MARGIN).is_none() {
            return Err(DualError::Infeasible);
        }
    }

    let gradient = |z: &DVector<f64>| {
        let (fu_z, fw_z) = oracle.vjp_joint(z);
        let a = q_solve(&(-fu_z - &g_grad));
        let b = fw_z * s;
        let push = oracle.jvp_joint(&a, &b);
        h_chol.solve(&(z - h_grad)) - push
    };
    let grad0 = gradient(&DVector::zeros(d));
    let cg = conjgrad(|dir| gradient(dir) - &grad0, &(-&grad0), CG_TOL, 2 * d)?;
    let z = cg.solution;
    let v = q_solve(&(-oracle.vjp_u(&z) - &g_grad));
    Ok(DualStep { v, z, oracle_calls: oracle.calls(), cg_iterations: cg.iterations })
}

pub fn dual_solve_final_state(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
    gamma: Option<f64>,
) -> Result<(ControlSequence, DualStep), DualError> {
    if !costs.final_state_only() {
        return Err(DualError::Unsupported);
    }
    let model = system.linearize(costs, u)?;
    let step = dual_step_from_model(&model, theta, sigma, gamma.map(|g| 1.0 / g).unwrap_or(0.0))?;
    Ok((u.offset(&step.v, 1.0), step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_identity_one_iteration() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let res = conjgrad(|x| x.clone(), &b, 1e-12, 10).unwrap();
        assert_eq!(res.iterations, 1);
        assert!((res.solution - b).amax() < 1e-15);
    }

    #[test]
    fn cg_two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let res = conjgrad(|x| &a * x, &b, 1e-14, 4).unwrap();
        assert!((res.solution[0] - 0.4).abs() < 1e-12);
        assert!((res.solution[1] - 0.2).abs() < 1e-12);
        assert!((&a * &res.solution - &b).norm() < 1e-12);
    }

    #[test]
    fn cg_detects_negative_curvature() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(conjgrad(|x| &a * x, &b, 1e-12, 4), Err(DualError::Breakdown { .. })));
    }

    fn scalar_model() -> LinearizedModel {
        let one = DMatrix::from_element(1, 1, 1.0);
        LinearizedModel::from_matrices(
            vec![one.clone()],
            vec![one.clone()],
            vec![one.clone()],
            vec![one.clone()],
            vec![DVector::from_element(1, -1.0)],
            vec![one],
            vec![DVector::zeros(1)],
        )
        .unwrap()
    }

    #[test]
    fn scalar_dual_matches_hand_solution() {
        let step = dual_step_from_model(&scalar_model(), 0.5, 1.0, 0.0).unwrap();
        assert!((step.v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((step.z[0] + 2.0 / 3.0).abs() < 1e-12);
        assert!(step.oracle_calls <= 11);
    }

    #[test]
    fn scalar_dual_infeasible() {
        assert_eq!(dual_step_from_model(&scalar_model(), 2.0, 1.0, 0.0).unwrap_err(), DualError::Infeasible);
    }
}
