//! Backward dynamic programming for the linear-quadratic exponential Gaussian
//! game
//!
//! ```text
//! min_v max_w  sum_t [ 1/2 y_t' H_t y_t + h_t' y_t ] + sum_t [ 1/2 v_t' (G_t + I/gamma) v_t + g_t' v_t ]
//!              - 1/(2 theta sigma^2) ||w||^2
//!   s.t. y_{t+1} = A_t y_t + B_t v_t + C_t w_t,
//! ```
//!
//! which is what one ILEQG / RegILEQG iteration has to solve.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynsys::LinearizedModel;
use crate::linalg::{factor_pd, max_eigenvalue, symmetrize, PD_REL_MARGIN};

/// Below this value of `theta * sigma^2` the risk term is dropped (plain LQR).
pub const RISK_NEUTRAL_THRESHOLD: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LeqgError {
    #[error("subproblem infeasible at stage {stage}: (theta sigma^2)^-1 I - C'PC is not positive definite")]
    Infeasible { stage: usize },
    #[error("ill-conditioned control Hessian at stage {stage}")]
    IllConditioned { stage: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Quadratic cost-to-go `1/2 y' P_t y + p_t' y + kappa_t`.
#[derive(Debug, Clone)]
pub struct CostToGo {
    /// `P_t` for `t = 0..=tau`.
    pub p_mat: Vec<DMatrix<f64>>,
    pub p_vec: Vec<DVector<f64>>,
    /// `P~_{t+1}` stored at index `t`, for `t = 0..tau`.
    pub p_tilde_mat: Vec<DMatrix<f64>>,
    pub p_tilde_vec: Vec<DVector<f64>>,
    /// `kappa_0`, the constant of the stage-0 cost-to-go.
    pub constant: f64,
}

/// Feedback gains: `v_t = K_t y_t + k_t`, `w_t = Lx_t y_t + Lu_t v_t + l_t`.
#[derive(Debug, Clone)]
pub struct PolicyGains {
    pub k_mat: Vec<DMatrix<f64>>,
    pub k_vec: Vec<DVector<f64>>,
    pub lx: Vec<DMatrix<f64>>,
    pub lu: Vec<DMatrix<f64>>,
    pub l_vec: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// `(v_0; ...; v_{tau-1})`.
    pub v: DVector<f64>,
    /// `(w_0; ...; w_{tau-1})`.
    pub w: DVector<f64>,
    /// `(y_1; ...; y_tau)`.
    pub y: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LeqgSolution {
    pub rollout: Rollout,
    pub gains: PolicyGains,
    pub cost_to_go: CostToGo,
    /// Optimal value of the game started from `y_0 = 0`.
    pub value: f64,
}

impl LeqgSolution {
    pub fn v(&self) -> &DVector<f64> {
        &self.rollout.v
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.rollout.w
    }
}

fn check_params(theta: f64, sigma: f64, prox_weight: f64) -> Result<f64, LeqgError> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(LeqgError::InvalidParameter(format!("theta must be finite and >= 0, got {theta}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(LeqgError::InvalidParameter(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if !(prox_weight >= 0.0 && prox_weight.is_finite()) {
        return Err(LeqgError::InvalidParameter(format!("proximal weight must be finite and >= 0, got {prox_weight}")));
    }
    Ok(theta * sigma * sigma)
}

struct StageOutput {
    p_tilde: DMatrix<f64>,
    p_tilde_vec: DVector<f64>,
    adversary: Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>, f64)>,
}

/// Adversary maximization at one stage. `None` when infeasible.
fn adversary_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DMatrix<f64>,
    pv: &DVector<f64>,
    s: f64,
) -> Option<StageOutput> {
    if s <= RISK_NEUTRAL_THRESHOLD {
        return Some(StageOutput { p_tilde: p.clone(), p_tilde_vec: pv.clone(), adversary: None });
    }
    let q = c.ncols();
    let inv_s = 1.0 / s;
    let ctp = c.transpose() * p;
    let mut m = DMatrix::identity(q, q) * inv_s - &ctp * c;
    symmetrize(&mut m);
    let chol = factor_pd(&m, inv_s, PD_REL_MARGIN)?;
    let ctpv = c.transpose() * pv;
    // M^{-1} C'P and M^{-1} C'p
    let minv_ctp = chol.solve(&ctp);
    let l = chol.solve(&ctpv);
    let mut p_tilde = p + ctp.transpose() * &minv_ctp;
    symmetrize(&mut p_tilde);
    let p_tilde_vec = pv + ctp.transpose() * &l;
    let lx = &minv_ctp * a;
    let lu = &minv_ctp * b;
    let kappa = 0.5 * ctpv.dot(&l);
    Some(StageOutput { p_tilde, p_tilde_vec, adversary: Some((lx, lu, l, kappa)) })
}

/// Backward Riccati-type recursion. `prox_weight` is `1/gamma`, added to every `G_t`.
pub fn backward_pass(
    model: &LinearizedModel,
    theta: f64,
    sigma: f64,
    prox_weight: f64,
) -> Result<(CostToGo, PolicyGains), LeqgError> {
    let s = check_params(theta, sigma, prox_weight)?;
    let tau = model.horizon();
    let (d, p_dim, q) = (model.state_dim(), model.control_dim(), model.noise_dim());

    let mut p_mat = vec![DMatrix::zeros(d, d); tau + 1];
    let mut p_vec = vec![DVector::zeros(d); tau + 1];
    let mut p_tilde_mat = vec![DMatrix::zeros(d, d); tau];
    let mut p_tilde_vec = vec![DVector::zeros(d); tau];
    let mut gains = PolicyGains {
        k_mat: vec![DMatrix::zeros(p_dim, d); tau],
        k_vec: vec![DVector::zeros(p_dim); tau],
        lx: vec![DMatrix::zeros(q, d); tau],
        lu: vec![DMatrix::zeros(q, p_dim); tau],
        l_vec: vec![DVector::zeros(q); tau],
    };
    p_mat[tau] = model.state_hessians[tau].clone();
    p_vec[tau] = model.state_gradients[tau].clone();
    let mut kappa = 0.0;

    for t in (0..tau).rev() {
        let (a, b, c) = (&model.a[t], &model.b[t], &model.c[t]);
        let stage = adversary_step(a, b, c, &p_mat[t + 1], &p_vec[t + 1], s)
            .ok_or(LeqgError::Infeasible { stage: t })?;
        if let Some((lx, lu, l, k)) = stage.adversary {
            gains.lx[t] = lx;
            gains.lu[t] = lu;
            gains.l_vec[t] = l;
            kappa += k;
        }
        let pt = &stage.p_tilde;
        let btp = b.transpose() * pt;
        let mut gu = &model.control_hessians[t] + DMatrix::identity(p_dim, p_dim) * prox_weight + &btp * b;
        symmetrize(&mut gu);
        let scale = gu.amax().max(f64::MIN_POSITIVE);
        let chol = factor_pd(&gu, scale, 1e-14).ok_or(LeqgError::IllConditioned { stage: t })?;
        let rhs = &model.control_gradients[t] + b.transpose() * &stage.p_tilde_vec;
        let k_mat = -chol.solve(&(&btp * a));
        let k_vec = -chol.solve(&rhs);
        kappa += 0.5 * rhs.dot(&k_vec);

        let atp = a.transpose() * pt;
        let mut pm = &model.state_hessians[t] + &atp * a + &atp * b * &k_mat;
        symmetrize(&mut pm);
        p_vec[t] = &model.state_gradients[t] + a.transpose() * (&stage.p_tilde_vec + pt * b * &k_vec);
        p_mat[t] = pm;
        gains.k_mat[t] = k_mat;
        gains.k_vec[t] = k_vec;
        p_tilde_mat[t] = stage.p_tilde;
        p_tilde_vec[t] = stage.p_tilde_vec;
    }

    Ok((CostToGo { p_mat, p_vec, p_tilde_mat, p_tilde_vec, constant: kappa }, gains))
}

/// Closed-loop rollout of the gains from `y0` through the linearized dynamics.
pub fn forward_rollout(gains: &PolicyGains, model: &LinearizedModel, y0: &DVector<f64>) -> Rollout {
    let tau = model.horizon();
    let (d, p, q) = (model.state_dim(), model.control_dim(), model.noise_dim());
    let mut v = DVector::zeros(tau * p);
    let mut w = DVector::zeros(tau * q);
    let mut ys = DVector::zeros(tau * d);
    let mut y = y0.clone();
    for t in 0..tau {
        let vt = &gains.k_mat[t] * &y + &gains.k_vec[t];
        let wt = &gains.lx[t] * &y + &gains.lu[t] * &vt + &gains.l_vec[t];
        y = &model.a[t] * &y + &model.b[t] * &vt + &model.c[t] * &wt;
        v.rows_mut(t * p, p).copy_from(&vt);
        w.rows_mut(t * q, q).copy_from(&wt);
        ys.rows_mut(t * d, d).copy_from(&y);
    }
    Rollout { v, w, y: ys }
}

/// Solve the game from `y_0 = 0`.
pub fn solve_leqg(model: &LinearizedModel, theta: f64, sigma: f64, prox_weight: f64) -> Result<LeqgSolution, LeqgError> {
    let (cost_to_go, gains) = backward_pass(model, theta, sigma, prox_weight)?;
    let rollout = forward_rollout(&gains, model, &DVector::zeros(model.state_dim()));
    let value = cost_to_go.constant;
    Ok(LeqgSolution { rollout, gains, cost_to_go, value })
}

/// `min_t lambda_min((theta sigma^2)^{-1} I - C_t' P_{t+1} C_t)`.
///
/// The recursion keeps going past an infeasible stage with `P~ = P` so the
/// number is defined everywhere. Positive iff [`solve_leqg`] is feasible
/// (up to the factorization margin). `+inf` when the risk term vanishes.
pub fn feasibility_margin(model: &LinearizedModel, theta: f64, sigma: f64, prox_weight: f64) -> f64 {
    let s = match check_params(theta, sigma, prox_weight) {
        Ok(s) => s,
        Err(_) => return f64::NAN,
    };
    if s <= RISK_NEUTRAL_THRESHOLD {
        return f64::INFINITY;
    }
    let tau = model.horizon();
    let p_dim = model.control_dim();
    let mut p = model.state_hessians[tau].clone();
    let mut pv = model.state_gradients[tau].clone();
    let mut margin = f64::INFINITY;
    for t in (0..tau).rev() {
        let (a, b, c) = (&model.a[t], &model.b[t], &model.c[t]);
        let ctpc = c.transpose() * &p * c;
        margin = margin.min(1.0 / s - max_eigenvalue(&ctpc));
        let stage = adversary_step(a, b, c, &p, &pv, s)
            .unwrap_or(StageOutput { p_tilde: p.clone(), p_tilde_vec: pv.clone(), adversary: None });
        let pt = &stage.p_tilde;
        let btp = b.transpose() * pt;
        let gu = &model.control_hessians[t] + DMatrix::identity(p_dim, p_dim) * prox_weight + &btp * b;
        let Some(chol) = gu.cholesky() else {
            return f64::NAN;
        };
        let k_mat = -chol.solve(&(&btp * a));
        let k_vec = -chol.solve(&(&model.control_gradients[t] + b.transpose() * &stage.p_tilde_vec));
        let atp = a.transpose() * pt;
        let mut next = &model.state_hessians[t] + &atp * a + &atp * b * &k_mat;
        symmetrize(&mut next);
        pv = &model.state_gradients[t] + a.transpose() * (&stage.p_tilde_vec + pt * b * &k_vec);
        p = next;
    }
    margin
}
