//! Bundled systems: explicit-Euler second-order mechanics (pendulum, two-link
//! arm), linear time-varying systems and closure-defined systems.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{
    finite_difference_jacobians, CostTerm, DynError, Dynamics, DynamicalSystem, QuadraticCost, StageCosts,
    StepJacobians,
};

/// Continuous field `z'' = f(z, z', u)` over `n` generalized coordinates.
pub trait SecondOrderField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn accel(&self, z: &DVector<f64>, zd: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(df/dz, df/dz', df/du)`. Central differences unless overridden.
    fn accel_jacobians(
        &self,
        z: &DVector<f64>,
        zd: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.dim();
        let fd = |arg: &DVector<f64>, which: usize| {
            let h = 1e-6 * arg.amax().max(1.0);
            let mut jac = DMatrix::zeros(n, arg.len());
            let mut probe = arg.clone();
            for j in 0..arg.len() {
                let eval = |p: &DVector<f64>| match which {
                    0 => self.accel(p, zd, u),
                    1 => self.accel(z, p, u),
                    _ => self.accel(z, zd, p),
                };
                probe[j] = arg[j] + h;
                let plus = eval(&probe);
                probe[j] = arg[j] - h;
                let minus = eval(&probe);
                probe[j] = arg[j];
                jac.set_column(j, &((plus - minus) / (2.0 * h)));
            }
            jac
        };
        (fd(z, 0), fd(zd, 1), fd(u, 2))
    }
}

/// `x1+ = x1 + dt x2`, `x2+ = x2 + dt f(x1, x2, u + w)` with `x = (x1, x2)`.
#[derive(Debug, Clone)]
pub struct EulerSystem<F> {
    field: F,
    dt: f64,
}

impl<F: SecondOrderField> EulerSystem<F> {
    pub fn new(field: F, dt: f64) -> Result<Self, DynError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynError::InvalidSystem(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { field, dt })
    }

    pub fn field(&self) -> &F {
        &self.field
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.field.dim();
        (x.rows(0, n).clone_owned(), x.rows(n, n).clone_owned())
    }
}

impl<F: SecondOrderField> Dynamics for EulerSystem<F> {
    fn state_dim(&self) -> usize {
        2 * self.field.dim()
    }

    fn control_dim(&self) -> usize {
        self.field.dim()
    }

    fn noise_dim(&self) -> usize {
        self.field.dim()
    }

    fn additive_noise(&self) -> bool {
        true
    }

    fn step(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let n = self.field.dim();
        let (z, zd) = self.split(x);
        let acc = self.field.accel(&z, &zd, &(u + w));
        let mut next = DVector::zeros(2 * n);
        next.rows_mut(0, n).copy_from(&(&z + &zd * self.dt));
        next.rows_mut(n, n).copy_from(&(&zd + acc * self.dt));
        next
    }

    fn jacobians(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> StepJacobians {
        let n = self.field.dim();
        let (z, zd) = self.split(x);
        let (fz, fzd, fu) = self.field.accel_jacobians(&z, &zd, &(u + w));
        let eye = DMatrix::<f64>::identity(n, n);
        let mut dx = DMatrix::zeros(2 * n, 2 * n);
        dx.view_mut((0, 0), (n, n)).copy_from(&eye);
        dx.view_mut((0, n), (n, n)).copy_from(&(&eye * self.dt));
        dx.view_mut((n, 0), (n, n)).copy_from(&(fz * self.dt));
        dx.view_mut((n, n), (n, n)).copy_from(&(eye + fzd * self.dt));
        let mut du = DMatrix::zeros(2 * n, n);
        du.view_mut((n, 0), (n, n)).copy_from(&(fu * self.dt));
        StepJacobians { dx, dw: du.clone(), du }
    }
}

/// Explicit-Euler discretization of a second-order field over `horizon` steps.
pub fn euler_discretize<F: SecondOrderField + 'static>(
    field: F,
    dt: f64,
    horizon: usize,
    initial_state: DVector<f64>,
) -> Result<DynamicalSystem, DynError> {
    DynamicalSystem::new(Arc::new(EulerSystem::new(field, dt)?), horizon, initial_state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub friction: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { mass: 1.0, length: 1.0, friction: 0.01, gravity: 9.81 }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<(), DynError> {
        if !(self.mass > 0.0 && self.length > 0.0) {
            return Err(DynError::InvalidSystem("pendulum mass and length must be positive".into()));
        }
        if !(self.friction.is_finite() && self.gravity.is_finite()) {
            return Err(DynError::InvalidSystem("pendulum parameters must be finite".into()));
        }
        Ok(())
    }

    fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }
}

/// `theta'' = -(g/l) sin theta - mu/(m l^2) theta' + u/(m l^2)`.
#[derive(Debug, Clone, Copy)]
pub struct Pendulum(pub PendulumParams);

impl SecondOrderField for Pendulum {
    fn dim(&self) -> usize {
        1
    }

    fn accel(&self, z: &DVector<f64>, zd: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.0;
        let i = p.inertia();
        DVector::from_element(1, -(p.gravity / p.length) * z[0].sin() - p.friction / i * zd[0] + u[0] / i)
    }

    fn accel_jacobians(
        &self,
        z: &DVector<f64>,
        _zd: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let p = &self.0;
        let i = p.inertia();
        (
            DMatrix::from_element(1, 1, -(p.gravity / p.length) * z[0].cos()),
            DMatrix::from_element(1, 1, -p.friction / i),
            DMatrix::from_element(1, 1, 1.0 / i),
        )
    }
}

pub fn pendulum_system(
    params: PendulumParams,
    dt: f64,
    horizon: usize,
    initial_state: DVector<f64>,
) -> Result<DynamicalSystem, DynError> {
    params.validate()?;
    euler_discretize(Pendulum(params), dt, horizon, initial_state)
}

/// `(pi - theta_tau)^2 + lambda1 theta'_tau^2 + lambda2 * dt * sum u_t^2`.
/// With `scale_by_dt = false` the control sum is not multiplied by `dt`.
pub fn pendulum_costs(
    lambda1: f64,
    lambda2: f64,
    dt: f64,
    horizon: usize,
    scale_by_dt: bool,
) -> Result<StageCosts, DynError> {
    let weight = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0 * lambda1]));
    let target = DVector::from_vec(vec![std::f64::consts::PI, 0.0]);
    let terminal = QuadraticCost::tracking(weight, &target)?;
    let r = 2.0 * lambda2 * if scale_by_dt { dt } else { 1.0 };
    let control = QuadraticCost::new(DMatrix::from_element(1, 1, r), DVector::zeros(1), 0.0)?;
    StageCosts::final_state(horizon, terminal, control)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmParams {
    /// Joint friction matrix entries.
    pub b11: f64,
    pub b12: f64,
    pub b21: f64,
    pub b22: f64,
    /// Link lengths (m).
    pub l1: f64,
    pub l2: f64,
    /// Link moments of inertia (kg m^2).
    pub k1: f64,
    pub k2: f64,
    /// Mass of the second link (kg) and distance from its joint to its center of mass (m).
    pub m2: f64,
    pub d2: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self { b11: 0.05, b12: 0.025, b21: 0.025, b22: 0.05, l1: 0.30, l2: 0.33, k1: 0.025, k2: 0.045, m2: 1.0, d2: 0.16 }
    }
}

impl ArmParams {
    pub fn a1(&self) -> f64 {
        self.k1 + self.k2 + self.m2 * self.l1 * self.l1
    }

    pub fn a2(&self) -> f64 {
        self.m2 * self.l1 * self.d2
    }

    pub fn a3(&self) -> f64 {
        self.k2
    }

    /// `det M(theta) = alpha - beta cos^2 theta2`.
    pub fn alpha(&self) -> f64 {
        self.a3() * (self.a1() - self.a3())
    }

    pub fn beta(&self) -> f64 {
        self.a2() * self.a2()
    }

    pub fn friction(&self) -> Matrix2<f64> {
        Matrix2::new(self.b11, self.b12, self.b21, self.b22)
    }

    pub fn validate(&self) -> Result<(), DynError> {
        if !(self.alpha() > self.beta()) {
            return Err(DynError::InvalidSystem(format!(
                "arm inertia matrix can become singular (alpha {} <= beta {})",
                self.alpha(),
                self.beta()
            )));
        }
        Ok(())
    }

    pub fn inertia(&self, theta2: f64) -> Matrix2<f64> {
        let (a1, a2, a3) = (self.a1(), self.a2(), self.a3());
        let c = theta2.cos();
        Matrix2::new(a1 + 2.0 * a2 * c, a3 + a2 * c, a3 + a2 * c, a3)
    }

    /// Closed-form inverse of [`ArmParams::inertia`].
    pub fn inertia_inverse(&self, theta2: f64) -> Matrix2<f64> {
        let (a1, a2, a3) = (self.a1(), self.a2(), self.a3());
        let c = theta2.cos();
        let det = self.alpha() - self.beta() * c * c;
        Matrix2::new(a3, -(a3 + a2 * c), -(a3 + a2 * c), a1 + 2.0 * a2 * c) / det
    }

    /// Centripetal and Coriolis forces.
    pub fn coriolis(&self, theta2: f64, dtheta: &Vector2<f64>) -> Vector2<f64> {
        let s = self.a2() * theta2.sin();
        Vector2::new(-dtheta[1] * (2.0 * dtheta[0] + dtheta[1]), dtheta[0] * dtheta[0]) * s
    }

    /// Noise scale `1 / ||M(theta)^{-1}||` (spectral norm).
    pub fn noise_scale(&self, theta2: f64) -> f64 {
        let inv = self.inertia_inverse(theta2);
        let top = inv.symmetric_eigenvalues().amax();
        1.0 / top
    }
}

/// `theta'' = M(theta)^{-1} (u - C(theta, theta') - B theta')`.
#[derive(Debug, Clone, Copy)]
pub struct TwoLinkArm(pub ArmParams);

impl SecondOrderField for TwoLinkArm {
    fn dim(&self) -> usize {
        2
    }

    fn accel(&self, z: &DVector<f64>, zd: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.0;
        let v = Vector2::new(zd[0], zd[1]);
        let r = Vector2::new(u[0], u[1]) - p.coriolis(z[1], &v) - p.friction() * v;
        let acc = p.inertia_inverse(z[1]) * r;
        DVector::from_vec(vec![acc[0], acc[1]])
    }

    fn accel_jacobians(
        &self,
        z: &DVector<f64>,
        zd: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let p = &self.0;
        let (s, c) = z[1].sin_cos();
        let a2 = p.a2();
        let v = Vector2::new(zd[0], zd[1]);
        let minv = p.inertia_inverse(z[1]);
        let r = Vector2::new(u[0], u[1]) - p.coriolis(z[1], &v) - p.friction() * v;

        let dm = Matrix2::new(2.0, 1.0, 1.0, 0.0) * (-a2 * s);
        let dc_dtheta2 = Vector2::new(-v[1] * (2.0 * v[0] + v[1]), v[0] * v[0]) * (a2 * c);
        let dacc_dtheta2 = -(minv * dm * minv * r) - minv * dc_dtheta2;

        let dc_dv = Matrix2::new(-2.0 * v[1], -2.0 * (v[0] + v[1]), 2.0 * v[0], 0.0) * (a2 * s);
        let dacc_dv = minv * (-dc_dv - p.friction());

        let mut fz = DMatrix::zeros(2, 2);
        fz[(0, 1)] = dacc_dtheta2[0];
        fz[(1, 1)] = dacc_dtheta2[1];
        let fzd = DMatrix::from_iterator(2, 2, dacc_dv.iter().copied());
        let fu = DMatrix::from_iterator(2, 2, minv.iter().copied());
        (fz, fzd, fu)
    }
}

pub fn two_link_arm_system(
    params: ArmParams,
    dt: f64,
    horizon: usize,
    initial_state: DVector<f64>,
) -> Result<DynamicalSystem, DynError> {
    params.validate()?;
    euler_discretize(TwoLinkArm(params), dt, horizon, initial_state)
}

/// `||theta_tau - target||^2 + lambda1 ||theta'_tau||^2 + lambda2 * dt * sum ||u_t||^2`.
pub fn two_link_arm_costs(
    target: [f64; 2],
    lambda1: f64,
    lambda2: f64,
    dt: f64,
    horizon: usize,
    scale_by_dt: bool,
) -> Result<StageCosts, DynError> {
    let weight = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 2.0 * lambda1, 2.0 * lambda1]));
    let goal = DVector::from_vec(vec![target[0], target[1], 0.0, 0.0]);
    let terminal = QuadraticCost::tracking(weight, &goal)?;
    let r = 2.0 * lambda2 * if scale_by_dt { dt } else { 1.0 };
    let control = QuadraticCost::new(DMatrix::identity(2, 2) * r, DVector::zeros(2), 0.0)?;
    StageCosts::final_state(horizon, terminal, control)
}

/// `x+ = A_t x + B_t u + C_t w + e_t`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    offset: Vec<DVector<f64>>,
    additive: bool,
}

impl LinearDynamics {
    /// Stage matrices indexed by `t`; stages past the end reuse the last entry.
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        offset: Vec<DVector<f64>>,
    ) -> Result<Self, DynError> {
        if a.is_empty() || b.is_empty() || c.is_empty() {
            return Err(DynError::InvalidSystem("linear system needs at least one stage".into()));
        }
        let d = a[0].nrows();
        let (p, q) = (b[0].ncols(), c[0].ncols());
        let shapes_ok = a.iter().all(|m| m.shape() == (d, d))
            && b.iter().all(|m| m.shape() == (d, p))
            && c.iter().all(|m| m.shape() == (d, q))
            && offset.iter().all(|e| e.len() == d);
        if !shapes_ok {
            return Err(DynError::Shape("linear system stage matrices disagree".into()));
        }
        let additive = b == c;
        Ok(Self { a, b, c, offset, additive })
    }

    pub fn time_invariant(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        let additive = b == c;
        Self { a: vec![a], b: vec![b], c: vec![c], offset: Vec::new(), additive }
    }

    fn pick<T>(v: &[T], t: usize) -> &T {
        &v[t.min(v.len() - 1)]
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn noise_dim(&self) -> usize {
        self.c[0].ncols()
    }

    fn additive_noise(&self) -> bool {
        self.additive
    }

    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut next = Self::pick(&self.a, t) * x + Self::pick(&self.b, t) * u + Self::pick(&self.c, t) * w;
        if !self.offset.is_empty() {
            next += Self::pick(&self.offset, t);
        }
        next
    }

    fn jacobians(&self, t: usize, _x: &DVector<f64>, _u: &DVector<f64>, _w: &DVector<f64>) -> StepJacobians {
        StepJacobians {
            dx: Self::pick(&self.a, t).clone(),
            du: Self::pick(&self.b, t).clone(),
            dw: Self::pick(&self.c, t).clone(),
        }
    }
}

type StepFn = dyn Fn(usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// A system given only by its step function; Jacobians by finite differences.
#[derive(Clone)]
pub struct FnDynamics {
    dims: (usize, usize, usize),
    additive: bool,
    step: Arc<StepFn>,
}

impl FnDynamics {
    pub fn new<F>(state_dim: usize, control_dim: usize, noise_dim: usize, additive: bool, step: F) -> Self
    where
        F: Fn(usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self { dims: (state_dim, control_dim, noise_dim), additive, step: Arc::new(step) }
    }
}

impl fmt::Debug for FnDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnDynamics").field("dims", &self.dims).field("additive", &self.additive).finish()
    }
}

impl Dynamics for FnDynamics {
    fn state_dim(&self) -> usize {
        self.dims.0
    }

    fn control_dim(&self) -> usize {
        self.dims.1
    }

    fn noise_dim(&self) -> usize {
        self.dims.2
    }

    fn additive_noise(&self) -> bool {
        self.additive
    }

    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        (self.step)(t, x, u, w)
    }

    fn jacobians(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> StepJacobians {
        finite_difference_jacobians(self, t, x, u, w)
    }
}

/// Quadratic state cost at every stage with the same weights.
pub fn uniform_quadratic_costs(
    horizon: usize,
    state: QuadraticCost,
    control: QuadraticCost,
) -> Result<StageCosts, DynError> {
    let (d, p) = (state.dim(), control.dim());
    StageCosts::new(d, p, vec![CostTerm::Quadratic(state); horizon], vec![CostTerm::Quadratic(control); horizon])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::ControlSequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[derive(Debug)]
    struct Free;
    impl SecondOrderField for Free {
        fn dim(&self) -> usize {
            1
        }
        fn accel(&self, _z: &DVector<f64>, _zd: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(1)
        }
    }

    #[derive(Debug)]
    struct DoubleIntegrator;
    impl SecondOrderField for DoubleIntegrator {
        fn dim(&self) -> usize {
            1
        }
        fn accel(&self, _z: &DVector<f64>, _zd: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            u.clone()
        }
    }

    #[test]
    fn free_drift() {
        let sys = euler_discretize(Free, 0.1, 5, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let traj = sys.rollout(&sys.zero_controls(), None).unwrap();
        for t in 0..5 {
            let x = traj.stage_owned(t);
            assert_eq!(x[1], 2.0);
            assert!((x[0] - (1.0 + 0.2 * (t + 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn double_integrator_from_rest() {
        let sys = euler_discretize(DoubleIntegrator, 1.0, 4, DVector::zeros(2)).unwrap();
        let u = ControlSequence::new(DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]), 1).unwrap();
        let traj = sys.rollout(&u, None).unwrap();
        let pos: Vec<f64> = (0..4).map(|t| traj.stage(t)[0]).collect();
        assert_eq!(pos, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn pendulum_rests_at_bottom() {
        let sys = pendulum_system(PendulumParams::default(), 0.05, 100, DVector::zeros(2)).unwrap();
        let traj = sys.rollout(&sys.zero_controls(), None).unwrap();
        assert_eq!(traj.as_vector().amax(), 0.0);
    }

    #[test]
    fn pendulum_linearization_at_rest() {
        let dt = 0.05;
        let p = PendulumParams::default();
        let sys = pendulum_system(p, dt, 10, DVector::zeros(2)).unwrap();
        let costs = pendulum_costs(0.1, 0.01, dt, 10, true).unwrap();
        let model = sys.linearize(&costs, &sys.zero_controls()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, dt, -dt * p.gravity / p.length, 1.0 - dt * p.friction]);
        for a in &model.a {
            assert!((a - &expected).amax() < 1e-15);
        }
        assert_eq!(model.b, model.c);
    }

    #[test]
    fn pendulum_cost_values() {
        let costs = pendulum_costs(0.1, 0.01, 0.05, 3, true).unwrap();
        let term = costs.state_term(3);
        let pi = std::f64::consts::PI;
        assert!(term.value(&DVector::from_vec(vec![pi, 0.0])).abs() < 1e-14);
        assert!((term.value(&DVector::zeros(2)) - pi * pi).abs() < 1e-12);
        assert!(costs.final_state_only());
    }

    #[test]
    fn arm_constants() {
        let p = ArmParams::default();
        assert!((p.a1() - 0.16).abs() < 1e-15);
        assert!((p.a2() - 0.048).abs() < 1e-15);
        assert!((p.a3() - 0.045).abs() < 1e-15);
        assert!((p.alpha() - 5.175e-3).abs() < 1e-15);
        assert!((p.beta() - 2.304e-3).abs() < 1e-15);
        assert!(p.alpha() > p.beta());
    }

    #[test]
    fn arm_inverse_matches_numeric_inverse() {
        let p = ArmParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let th: f64 = rng.random_range(-10.0..10.0);
            let numeric = p.inertia(th).try_inverse().unwrap();
            assert!((numeric - p.inertia_inverse(th)).amax() < 1e-10);
        }
    }

    #[test]
    fn arm_force_cancellation() {
        let p = ArmParams::default();
        let arm = TwoLinkArm(p);
        let z = DVector::from_vec(vec![0.4, 1.3]);
        let zd = DVector::from_vec(vec![-0.7, 2.1]);
        let v = Vector2::new(zd[0], zd[1]);
        let force = p.coriolis(z[1], &v) + p.friction() * v;
        let u = DVector::from_vec(vec![force[0], force[1]]);
        assert!(arm.accel(&z, &zd, &u).amax() < 1e-14);
    }

    fn check_jacobians(sys: &dyn Dynamics, rng: &mut ChaCha8Rng, scale: f64) {
        let n = |k: usize, rng: &mut ChaCha8Rng| DVector::from_fn(k, |_, _| rng.random_range(-scale..scale));
        for _ in 0..100 {
            let x = n(sys.state_dim(), rng);
            let u = n(sys.control_dim(), rng);
            let w = n(sys.noise_dim(), rng);
            let jac = sys.jacobians(0, &x, &u, &w);
            let fd = finite_difference_jacobians(sys, 0, &x, &u, &w);
            assert!((&jac.dx - &fd.dx).amax() < 1e-5, "dx {}", (&jac.dx - &fd.dx).amax());
            assert!((&jac.du - &fd.du).amax() < 1e-5);
            assert!((&jac.dw - &fd.dw).amax() < 1e-5);
            assert_eq!(jac.du, jac.dw);
        }
    }

    #[test]
    fn bundled_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pend = EulerSystem::new(Pendulum(PendulumParams::default()), 0.05).unwrap();
        check_jacobians(&pend, &mut rng, 3.0);
        let arm = EulerSystem::new(TwoLinkArm(ArmParams::default()), 0.05).unwrap();
        check_jacobians(&arm, &mut rng, 2.0);
    }

    #[test]
    fn arm_noise_scale_is_positive() {
        let p = ArmParams::default();
        let s = p.noise_scale(0.0);
        let inv = p.inertia_inverse(0.0);
        let v = inv * Vector2::new(1.0, 0.0);
        assert!(s > 0.0 && 1.0 / s >= v.norm() - 1e-12);
    }
}
