//! Slow, independent implementations used to check the solvers: dense
//! saddle-point assembly, a textbook Riccati LQR, dense Gauss-Newton steps and
//! quadrature of the Gaussian expectation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynsys::systems::LinearDynamics;
use crate::dynsys::{
    ControlSequence, CostTerm, DynError, DynamicalSystem, LinearizedModel, QuadraticCost, StageCosts,
};
use crate::linalg::{max_eigenvalue, symmetrize};

/// Jacobians built column by column from impulse responses of the linearized
/// dynamics. Returns `(X_u, X_w)`, shaped like `trajectory_jacobian`.
pub fn impulse_jacobians(model: &LinearizedModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let (tau, d, p, q) = (model.horizon(), model.state_dim(), model.control_dim(), model.noise_dim());
    let y0 = DVector::zeros(d);
    let mut xu = DMatrix::zeros(tau * p, tau * d);
    for j in 0..tau * p {
        let mut e = DVector::zeros(tau * p);
        e[j] = 1.0;
        xu.set_row(j, &model.propagate(&e, None, &y0).transpose());
    }
    let mut xw = DMatrix::zeros(tau * q, tau * d);
    let zero_v = DVector::zeros(tau * p);
    for j in 0..tau * q {
        let mut e = DVector::zeros(tau * q);
        e[j] = 1.0;
        xw.set_row(j, &model.propagate(&zero_v, Some(&e), &y0).transpose());
    }
    (xu, xw)
}

/// `Q(v, w) = 1/2 [v; w]' M [v; w] + c' [v; w]` for the subproblem from `y_0 = 0`.
#[derive(Debug, Clone)]
pub struct DenseGame {
    pub m: DMatrix<f64>,
    pub c: DVector<f64>,
    pub n_v: usize,
    pub n_w: usize,
}

impl DenseGame {
    pub fn assemble(model: &LinearizedModel, theta: f64, sigma: f64, prox_weight: f64) -> Self {
        let (xu, xw) = impulse_jacobians(model);
        let h = model.stacked_state_hessian();
        let hg = model.stacked_state_gradient();
        let (n_v, n_w) = (xu.nrows(), xw.nrows());
        let s = theta * sigma * sigma;
        let mut m = DMatrix::zeros(n_v + n_w, n_v + n_w);
        let huu = &xu * &h * xu.transpose() + model.stacked_control_hessian() + DMatrix::identity(n_v, n_v) * prox_weight;
        let huw = &xu * &h * xw.transpose();
        let mut hww = &xw * &h * xw.transpose();
        if s > 0.0 {
            hww -= DMatrix::identity(n_w, n_w) / s;
        }
        m.view_mut((0, 0), (n_v, n_v)).copy_from(&huu);
        m.view_mut((0, n_v), (n_v, n_w)).copy_from(&huw);
        m.view_mut((n_v, 0), (n_w, n_v)).copy_from(&huw.transpose());
        m.view_mut((n_v, n_v), (n_w, n_w)).copy_from(&hww);
        symmetrize(&mut m);
        let mut c = DVector::zeros(n_v + n_w);
        c.rows_mut(0, n_v).copy_from(&(&xu * &hg + model.stacked_control_gradient()));
        c.rows_mut(n_v, n_w).copy_from(&(&xw * &hg));
        Self { m, c, n_v, n_w }
    }

    pub fn value(&self, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let z = self.join(v, w);
        0.5 * z.dot(&(&self.m * &z)) + self.c.dot(&z)
    }

    pub fn gradient(&self, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let z = self.join(v, w);
        &self.m * z + &self.c
    }

    /// Scale used to normalize residuals.
    pub fn scale(&self) -> f64 {
        1.0 + self.m.amax().max(self.c.amax())
    }

    fn join(&self, v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_v + self.n_w);
        z.rows_mut(0, self.n_v).copy_from(v);
        z.rows_mut(self.n_v, self.n_w).copy_from(w);
        z
    }

    /// True when `Q` is strictly concave in `w` (the open-loop game is well posed).
    pub fn concave_in_w(&self) -> bool {
        let hww = self.m.view((self.n_v, self.n_v), (self.n_w, self.n_w)).clone_owned();
        (-hww).cholesky().is_some()
    }

    /// Stationary point `(v, w, Q(v, w))` by one dense LU solve.
    pub fn saddle(&self) -> Option<(DVector<f64>, DVector<f64>, f64)> {
        let z = self.m.clone().lu().solve(&(-&self.c))?;
        let v = z.rows(0, self.n_v).clone_owned();
        let w = z.rows(self.n_v, self.n_w).clone_owned();
        let val = 0.5 * self.c.dot(&z);
        Some((v, w, val))
    }
}

/// Saddle point of the subproblem by dense assembly; `None` if the open-loop
/// game is not concave in `w`.
pub fn dense_saddle(model: &LinearizedModel, theta: f64, sigma: f64, prox_weight: f64) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let game = DenseGame::assemble(model, theta, sigma, prox_weight);
    if theta * sigma * sigma > 0.0 && !game.concave_in_w() {
        return None;
    }
    game.saddle()
}

/// Classical LQR with affine terms (no noise): returns `(v, value)`.
pub fn riccati_lqr(model: &LinearizedModel, prox_weight: f64) -> Option<(DVector<f64>, f64)> {
    let (tau, d, p) = (model.horizon(), model.state_dim(), model.control_dim());
    let mut vxx = model.state_hessians[tau].clone();
    let mut vx = model.state_gradients[tau].clone();
    let mut v0 = 0.0;
    let mut gains = Vec::with_capacity(tau);
    for t in (0..tau).rev() {
        let (a, b) = (&model.a[t], &model.b[t]);
        let quu = &model.control_hessians[t] + DMatrix::identity(p, p) * prox_weight + b.transpose() * &vxx * b;
        let qux = b.transpose() * &vxx * a;
        let qu = &model.control_gradients[t] + b.transpose() * &vx;
        let inv = quu.clone().try_inverse()?;
        let big_k = -&inv * &qux;
        let small_k = -&inv * &qu;
        v0 += 0.5 * small_k.dot(&(&quu * &small_k)) + qu.dot(&small_k);
        let qxx = &model.state_hessians[t] + a.transpose() * &vxx * a;
        let qx = &model.state_gradients[t] + a.transpose() * &vx;
        vx = &qx + big_k.transpose() * &quu * &small_k + big_k.transpose() * &qu + qux.transpose() * &small_k;
        vxx = &qxx + big_k.transpose() * &quu * &big_k + big_k.transpose() * &qux + qux.transpose() * &big_k;
        symmetrize(&mut vxx);
        gains.push((big_k, small_k));
    }
    gains.reverse();
    let mut y = DVector::zeros(d);
    let mut v = DVector::zeros(tau * p);
    for t in 0..tau {
        let (k_mat, k_vec) = &gains[t];
        let vt = k_mat * &y + k_vec;
        y = &model.a[t] * &y + &model.b[t] * &vt;
        v.rows_mut(t * p, p).copy_from(&vt);
    }
    Some((v, v0))
}

/// Dense regularized Gauss-Newton step `-(G + I/gamma + X H X')^{-1} (X h~ + g~)`.
pub fn gauss_newton_step(model: &LinearizedModel, prox_weight: f64) -> Option<DVector<f64>> {
    let (xu, _) = impulse_jacobians(model);
    let n = xu.nrows();
    let h = model.stacked_state_hessian();
    let lhs = &xu * &h * xu.transpose() + model.stacked_control_hessian() + DMatrix::identity(n, n) * prox_weight;
    let rhs = &xu * model.stacked_state_gradient() + model.stacked_control_gradient();
    Some(-lhs.lu().solve(&rhs)?)
}

/// Regularized iLQR (Gauss-Newton) iterates from the zero command with a
/// constant proximal weight.
pub fn ilqr_iterates(
    system: &DynamicalSystem,
    costs: &StageCosts,
    prox_weight: f64,
    iterations: usize,
) -> Result<Vec<ControlSequence>, DynError> {
    let mut u = system.zero_controls();
    let mut out = vec![u.clone()];
    for _ in 0..iterations {
        let model = system.linearize(costs, &u)?;
        let (v, _) = riccati_lqr(&model, prox_weight).ok_or_else(|| DynError::Model("singular LQR step".into()))?;
        u = u.offset(&v, 1.0);
        out.push(u.clone());
    }
    Ok(out)
}

/// `(1/theta) log E exp(theta q(w)) + g` for `w ~ N(0, sigma^2 I)`, with `q` the
/// local quadratic model of `h` along the noise Jacobian, by the trapezoid rule
/// on a grid centred on the tilted Gaussian. Only for `tau q <= 2`.
pub fn quadrature_surrogate(model: &LinearizedModel, theta: f64, sigma: f64, nodes: usize) -> Option<f64> {
    let (_, xw) = impulse_jacobians(model);
    let n = xw.nrows();
    if n == 0 || n > 2 || theta <= 0.0 {
        return None;
    }
    let h = model.stacked_state_hessian();
    let hg = model.stacked_state_gradient();
    let k = &xw * &h * xw.transpose();
    let b = &xw * &hg;
    let q = |w: &DVector<f64>| model.state_cost + b.dot(w) + 0.5 * w.dot(&(&k * w));
    let precision = DMatrix::identity(n, n) / (sigma * sigma) - &k * theta;
    let cov = precision.clone().try_inverse()?;
    if cov.symmetric_eigenvalues().min() <= 0.0 {
        return None;
    }
    let center = &cov * (&b * theta);
    let half = 14.0;
    let std: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    let steps: Vec<f64> = std.iter().map(|s| 2.0 * half * s / (nodes - 1) as f64).collect();
    let log_norm = -(n as f64) * 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let mut logs = Vec::with_capacity(nodes.pow(n as u32));
    let coord = |i: usize, j: usize| center[i] - half * std[i] + j as f64 * steps[i];
    let exponent = |w: &DVector<f64>| theta * q(w) - w.norm_squared() / (2.0 * sigma * sigma);
    if n == 1 {
        for j in 0..nodes {
            let w = DVector::from_element(1, coord(0, j));
            logs.push(exponent(&w));
        }
    } else {
        for j in 0..nodes {
            for l in 0..nodes {
                let w = DVector::from_vec(vec![coord(0, j), coord(1, l)]);
                logs.push(exponent(&w));
            }
        }
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    let log_cell: f64 = steps.iter().map(|s| s.ln()).sum();
    let log_integral = m + sum.ln() + log_cell + log_norm;
    Some(log_integral / theta + model.control_cost)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        g[i] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Shape of a random test instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceShape {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    /// Only the last stage carries a state cost.
    pub final_state_only: bool,
    /// `C_t = B_t` (forces `noise_dim = control_dim`).
    pub additive: bool,
}

fn randn<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn randv<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

struct RandomStages {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
    hl: Vec<DVector<f64>>,
    g: Vec<DMatrix<f64>>,
    gl: Vec<DVector<f64>>,
}

fn random_stages<R: Rng + ?Sized>(rng: &mut R, shape: &InstanceShape) -> RandomStages {
    let InstanceShape { horizon: tau, state_dim: d, control_dim: p, .. } = *shape;
    let q = if shape.additive { p } else { shape.noise_dim };
    let mut out = RandomStages { a: vec![], b: vec![], c: vec![], h: vec![], hl: vec![], g: vec![], gl: vec![] };
    for t in 0..tau {
        out.a.push(DMatrix::identity(d, d) + randn(rng, d, d) * (0.3 / (d as f64).sqrt()));
        let b = randn(rng, d, p) * 0.5;
        out.c.push(if shape.additive { b.clone() } else { randn(rng, d, q) * 0.5 });
        out.b.push(b);
        let last = t + 1 == tau;
        if shape.final_state_only && !last {
            out.h.push(DMatrix::zeros(d, d));
            out.hl.push(DVector::zeros(d));
        } else {
            let l = randn(rng, d, d);
            let mut h = &l * l.transpose() * (0.5 / d as f64);
            if shape.final_state_only {
                h += DMatrix::identity(d, d) * 0.1;
            }
            out.h.push(h);
            out.hl.push(randv(rng, d));
        }
        let m = randn(rng, p, p);
        out.g.push(&m * m.transpose() * (0.3 / p as f64) + DMatrix::identity(p, p) * 0.5);
        out.gl.push(randv(rng, p) * 0.3);
    }
    out
}

/// Random linear-quadratic subproblem. Terminal Hessians of final-state
/// instances are positive definite.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, shape: &InstanceShape) -> LinearizedModel {
    let s = random_stages(rng, shape);
    LinearizedModel::from_matrices(s.a, s.b, s.c, s.h, s.hl, s.g, s.gl).expect("consistent random shapes")
}

/// Random linear system with quadratic costs, starting from a random state.
pub fn random_linear_problem<R: Rng + ?Sized>(rng: &mut R, shape: &InstanceShape) -> (DynamicalSystem, StageCosts) {
    let s = random_stages(rng, shape);
    let d = shape.state_dim;
    let x0 = randv(rng, d);
    let dynamics = LinearDynamics::new(s.a, s.b, s.c, Vec::new()).expect("consistent random shapes");
    let system = DynamicalSystem::new(Arc::new(dynamics), shape.horizon, x0).expect("valid system");
    let state = s
        .h
        .into_iter()
        .zip(s.hl)
        .map(|(h, l)| {
            if h.amax() == 0.0 {
                CostTerm::Zero
            } else {
                CostTerm::Quadratic(QuadraticCost::new(h, l, 0.1).expect("symmetric"))
            }
        })
        .collect();
    let control = s
        .g
        .into_iter()
        .zip(s.gl)
        .map(|(g, l)| CostTerm::Quadratic(QuadraticCost::new(g, l, 0.0).expect("symmetric")))
        .collect();
    let costs = StageCosts::new(d, shape.control_dim, state, control).expect("valid costs");
    (system, costs)
}

/// `lambda_max(X_w H X_w')`; the open-loop game is concave in `w` iff
/// `theta sigma^2` times this is below one.
pub fn open_loop_curvature(model: &LinearizedModel) -> f64 {
    let (_, xw) = impulse_jacobians(model);
    max_eigenvalue(&(&xw * model.stacked_state_hessian() * xw.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::trajectory_jacobian;

    fn model() -> LinearizedModel {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.3, 0.95]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.2]);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        LinearizedModel::from_matrices(
            vec![a; 3],
            vec![b.clone(); 3],
            vec![b; 3],
            vec![h; 3],
            vec![DVector::from_vec(vec![0.3, -0.1]); 3],
            vec![DMatrix::from_element(1, 1, 0.7); 3],
            vec![DVector::from_element(1, 0.05); 3],
        )
        .unwrap()
    }

    #[test]
    fn impulse_jacobian_matches_structured_one() {
        let m = model();
        let (xu, _) = impulse_jacobians(&m);
        assert!((xu - trajectory_jacobian(&m)).amax() < 1e-14);
    }

    #[test]
    fn lqr_matches_dense_gauss_newton() {
        let m = model();
        let (v, _) = riccati_lqr(&m, 0.3).unwrap();
        let dense = gauss_newton_step(&m, 0.3).unwrap();
        assert!((v - dense).amax() < 1e-12);
    }

    #[test]
    fn quadrature_of_scalar_identity() {
        // x~(u) = u, h = x^2/2, theta = 1/2, sigma = 1: log 2 + u^2
        let one = DMatrix::from_element(1, 1, 1.0);
        let u = 0.6;
        let mut m = LinearizedModel::from_matrices(
            vec![one.clone()],
            vec![one.clone()],
            vec![one.clone()],
            vec![one.clone()],
            vec![DVector::from_element(1, u)],
            vec![one],
            vec![DVector::zeros(1)],
        )
        .unwrap();
        m.state_cost = 0.5 * u * u;
        let val = quadrature_surrogate(&m, 0.5, 1.0, 801).unwrap();
        assert!((val - (2f64.ln() + u * u)).abs() < 1e-10, "{val}");
    }
}
