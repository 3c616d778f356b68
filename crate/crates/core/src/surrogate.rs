//! Surrogate risk-sensitive cost: the exponential-utility cost of the
//! trajectory obtained by linearizing `x~(u + w)` in `w`, in closed form.
//!
//! With `K = X_w H X_w'`, `S = I - theta sigma^2 K`:
//!
//! ```text
//! f^(u) = -1/(2 theta) log det S + h(x~(u)) + 1/2 w*' X_w h~ + g(u),
//! w*    = theta sigma^2 S^{-1} X_w h~.
//! ```
//!
//! Everything here is dense and meant for validation and moderate sizes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::dynsys::{
    noise_jacobian, trajectory_jacobian, ControlSequence, DynError, DynamicalSystem, LinearizedModel, StageCosts,
};
use crate::linalg::{factor_pd, symmetrize, PD_REL_MARGIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("condition sigma^-2 I > theta X H X' violated (theta too large for this command)")]
    ConditionViolated,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

/// Which state cost the surrogate was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateVariant {
    /// Quadratic state costs: the surrogate itself.
    Quadratic,
    /// Non-quadratic state costs replaced by their local quadratic model.
    LocalQuadratic,
}

/// Gaussian `N(w*, Sigma)` with `Sigma^{-1} = sigma^-2 I - theta X_w H X_w'`.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub theta: f64,
    pub sigma: f64,
    /// Adversarial noise mean `w*`.
    pub mean: DVector<f64>,
    /// Command Jacobian `X`, `(tau p) x (tau d)`.
    pub x: DMatrix<f64>,
    /// Noise Jacobian `X_w`, `(tau q) x (tau d)`.
    pub xw: DMatrix<f64>,
    /// Block-diagonal state Hessian.
    pub h: DMatrix<f64>,
    /// Stacked state gradient `h~`.
    pub h_grad: DVector<f64>,
    /// Cholesky factor of `S = sigma^2 Sigma^{-1}`.
    s_chol: Cholesky<f64, Dyn>,
}

impl GaussianApprox {
    /// `Sigma rhs`.
    pub fn covariance_solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.s_chol.solve(rhs) * (self.sigma * self.sigma)
    }

    /// Dense `Sigma^{-1}` (diagnostics only).
    pub fn precision(&self) -> DMatrix<f64> {
        let n = self.xw.nrows();
        let k = &self.xw * &self.h * self.xw.transpose();
        DMatrix::identity(n, n) / (self.sigma * self.sigma) - k * self.theta
    }

    /// `log det S`.
    pub fn log_det_s(&self) -> f64 {
        2.0 * self.s_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub value: f64,
    /// `-1/(2 theta) log det S` (its `theta -> 0` limit at `theta = 0`).
    pub log_det_term: f64,
    /// `h(x~(u))`.
    pub nominal_cost: f64,
    /// `1/2 w*' X_w h~`.
    pub tilt_term: f64,
    /// `g(u)`.
    pub control_cost: f64,
    /// `grad g + X (h~ + H X_w' w*)`, when requested.
    pub gradient: Option<DVector<f64>>,
    pub variant: SurrogateVariant,
}

fn check(theta: f64, sigma: f64) -> Result<(), SurrogateError> {
    if !(theta >= 0.0 && theta.is_finite() && sigma >= 0.0 && sigma.is_finite()) {
        return Err(SurrogateError::InvalidParameter(format!("theta = {theta}, sigma = {sigma}")));
    }
    Ok(())
}

pub fn gaussian_approx_from_model(model: &LinearizedModel, theta: f64, sigma: f64) -> Result<GaussianApprox, SurrogateError> {
    check(theta, sigma)?;
    let x = trajectory_jacobian(model);
    let xw = noise_jacobian(model);
    let h = model.stacked_state_hessian();
    let h_grad = model.stacked_state_gradient();
    let n = xw.nrows();
    let s = theta * sigma * sigma;
    let mut smat = DMatrix::identity(n, n) - (&xw * &h * xw.transpose()) * s;
    symmetrize(&mut smat);
    let s_chol = factor_pd(&smat, 1.0, PD_REL_MARGIN).ok_or(SurrogateError::ConditionViolated)?;
    let mean = s_chol.solve(&(&xw * &h_grad)) * s;
    Ok(GaussianApprox { theta, sigma, mean, x, xw, h, h_grad, s_chol })
}

pub fn gaussian_approx(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
) -> Result<GaussianApprox, SurrogateError> {
    let model = system.linearize(costs, u)?;
    gaussian_approx_from_model(&model, theta, sigma)
}

fn log_det_term(ga: &GaussianApprox) -> f64 {
    let s = ga.theta * ga.sigma * ga.sigma;
    if s == 0.0 {
        let k = &ga.xw * &ga.h * ga.xw.transpose();
        return 0.5 * ga.sigma * ga.sigma * k.trace();
    }
    if s < 1e-6 {
        // -1/(2 theta) sum log(1 - s lambda_i), accurate for small s.
        let mut k = &ga.xw * &ga.h * ga.xw.transpose();
        symmetrize(&mut k);
        let sum: f64 = k.symmetric_eigenvalues().iter().map(|&l| (-s * l).ln_1p()).sum();
        return -sum / (2.0 * ga.theta);
    }
    -ga.log_det_s() / (2.0 * ga.theta)
}

pub fn surrogate_from_model(
    model: &LinearizedModel,
    theta: f64,
    sigma: f64,
    with_gradient: bool,
) -> Result<SurrogateEval, SurrogateError> {
    let ga = gaussian_approx_from_model(model, theta, sigma)?;
    Ok(evaluate(model, &ga, with_gradient))
}

fn evaluate(model: &LinearizedModel, ga: &GaussianApprox, with_gradient: bool) -> SurrogateEval {
    let ld = log_det_term(ga);
    let tilt = 0.5 * ga.mean.dot(&(&ga.xw * &ga.h_grad));
    let gradient = with_gradient.then(|| truncated_gradient_from(model, ga));
    SurrogateEval {
        value: ld + model.state_cost + tilt + model.control_cost,
        log_det_term: ld,
        nominal_cost: model.state_cost,
        tilt_term: tilt,
        control_cost: model.control_cost,
        gradient,
        variant: if model.quadratic_costs { SurrogateVariant::Quadratic } else { SurrogateVariant::LocalQuadratic },
    }
}

fn truncated_gradient_from(model: &LinearizedModel, ga: &GaussianApprox) -> DVector<f64> {
    let inner = &ga.h_grad + &ga.h * (ga.xw.transpose() * &ga.mean);
    &ga.x * inner + model.stacked_control_gradient()
}

pub fn surrogate_value(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
) -> Result<SurrogateEval, SurrogateError> {
    let model = system.linearize(costs, u)?;
    surrogate_from_model(&model, theta, sigma, false)
}

/// Full composite gradient `grad g(u) + X (h~ + H X_w' w*)`.
pub fn truncated_gradient(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
) -> Result<DVector<f64>, SurrogateError> {
    let model = system.linearize(costs, u)?;
    let ga = gaussian_approx_from_model(&model, theta, sigma)?;
    Ok(truncated_gradient_from(&model, &ga))
}

/// Direct dense step `v = -(G + I/gamma + X H X' + theta X H X_w' Sigma X_w H X')^{-1} grad`.
/// `prox_weight` is `1/gamma` (zero for the unregularized step).
pub fn reg_step_from_model(model: &LinearizedModel, theta: f64, sigma: f64, prox_weight: f64) -> Result<DVector<f64>, SurrogateError> {
    if !(prox_weight >= 0.0 && prox_weight.is_finite()) {
        return Err(SurrogateError::InvalidParameter(format!("proximal weight {prox_weight}")));
    }
    let ga = gaussian_approx_from_model(model, theta, sigma)?;
    let grad = truncated_gradient_from(model, &ga);
    let n = ga.x.nrows();
    let xh = &ga.x * &ga.h;
    let xwhx = &ga.xw * xh.transpose();
    let mut lhs = model.stacked_control_hessian() + DMatrix::identity(n, n) * prox_weight + &xh * ga.x.transpose();
    if theta > 0.0 {
        lhs += xwhx.transpose() * ga.covariance_solve(&xwhx) * theta;
    }
    symmetrize(&mut lhs);
    let chol = lhs.cholesky().ok_or_else(|| SurrogateError::InvalidParameter("step matrix is not positive definite".into()))?;
    Ok(-chol.solve(&grad))
}

/// `u+ = u + v` with `v` from [`reg_step_from_model`]; `gamma = None` means no proximal term.
pub fn reg_step_closed_form(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
    gamma: Option<f64>,
) -> Result<ControlSequence, SurrogateError> {
    let model = system.linearize(costs, u)?;
    let prox = gamma.map(|g| 1.0 / g).unwrap_or(0.0);
    let v = reg_step_from_model(&model, theta, sigma, prox)?;
    Ok(u.offset(&v, 1.0))
}
