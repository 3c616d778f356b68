use ileqg::leqg::solve_leqg;
use ileqg::linalg::rel_err;
use ileqg::montecarlo::mc_risk_value;
use ileqg::reference::{
    fd_gradient, open_loop_curvature, quadrature_surrogate, random_linear_problem, random_model, InstanceShape,
};
use ileqg::surrogate::{
    gaussian_approx, reg_step_closed_form, reg_step_from_model, surrogate_from_model, surrogate_value,
    truncated_gradient, SurrogateError,
};
use ileqg::ControlSequence;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn shape(tau: usize, d: usize, p: usize, q: usize, additive: bool) -> InstanceShape {
    InstanceShape { horizon: tau, state_dim: d, control_dim: p, noise_dim: q, final_state_only: false, additive }
}

fn random_controls(seed: u64, tau: usize, p: usize) -> ControlSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = DVector::from_fn(tau * p, |_, _| StandardNormal.sample(&mut rng));
    ControlSequence::new(data, p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_matches_quadrature(
        seed in any::<u64>(), two_stages in any::<bool>(), d in 1usize..=3, p in 1usize..=2, q in 1usize..=2,
        frac in 0.05f64..0.8,
    ) {
        let s = if two_stages { shape(2, d, p, 1, false) } else { shape(1, d, p, q, false) };
        let mut m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &s);
        m.state_cost = 0.7;
        m.control_cost = 0.2;
        let theta = frac / open_loop_curvature(&m).max(1e-6);
        let closed = surrogate_from_model(&m, theta, 1.0, false).unwrap().value;
        let quad = quadrature_surrogate(&m, theta, 1.0, 1201).unwrap();
        prop_assert!((closed - quad).abs() <= 1e-8 * closed.abs().max(1.0), "{closed} vs {quad}");
    }

    #[test]
    fn value_is_sum_of_components(
        seed in any::<u64>(), tau in 1usize..=6, d in 1usize..=3, p in 1usize..=3, frac in 0.0f64..0.9,
    ) {
        let m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &shape(tau, d, p, p, true));
        let theta = frac / open_loop_curvature(&m).max(1e-6);
        let ev = surrogate_from_model(&m, theta, 1.0, false).unwrap();
        let sum = ev.log_det_term + ev.nominal_cost + ev.tilt_term + ev.control_cost;
        prop_assert!((ev.value - sum).abs() <= 1e-14 * ev.value.abs().max(1.0));
    }

    #[test]
    fn truncated_gradient_is_exact_on_linear_systems(
        seed in any::<u64>(), tau in 1usize..=6, d in 1usize..=3, p in 1usize..=3, frac in 0.0f64..0.8,
    ) {
        let s = shape(tau, d, p, p, true);
        let (system, costs) = random_linear_problem(&mut ChaCha8Rng::seed_from_u64(seed), &s);
        let u = random_controls(seed, tau, p);
        let m = system.linearize(&costs, &u).unwrap();
        let theta = frac / open_loop_curvature(&m).max(1e-6);
        let g = truncated_gradient(&system, &costs, &u, theta, 1.0).unwrap();
        let f = |x: &DVector<f64>| {
            let uu = ControlSequence::new(x.clone(), p).unwrap();
            surrogate_value(&system, &costs, &uu, theta, 1.0).unwrap().value
        };
        let fd = fd_gradient(f, u.as_vector(), 1e-4);
        prop_assert!((&g - &fd).amax() < 1e-6 * g.amax().max(1.0), "{}", (&g - &fd).amax());
    }

    #[test]
    fn dp_step_equals_closed_form_step(
        seed in any::<u64>(), tau in 1usize..=10, d in 1usize..=3, p in 1usize..=3,
        frac in 0.0f64..0.9, prox in prop_oneof![Just(0.0), 0.01f64..4.0],
    ) {
        let m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &shape(tau, d, p, p, true));
        let theta = frac / open_loop_curvature(&m).max(1e-6);
        let dp = solve_leqg(&m, theta, 1.0, prox).unwrap();
        let dense = reg_step_from_model(&m, theta, 1.0, prox).unwrap();
        prop_assert!(rel_err(dp.v(), &dense) < 1e-8, "{}", rel_err(dp.v(), &dense));
    }

    #[test]
    fn step_length_grows_with_gamma(
        seed in any::<u64>(), tau in 1usize..=6, d in 1usize..=3, p in 1usize..=3, frac in 0.0f64..0.9,
    ) {
        let m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &shape(tau, d, p, p, true));
        let theta = frac / open_loop_curvature(&m).max(1e-6);
        let mut prev = 0.0;
        for gamma in [1e-3, 1e-2, 0.1, 1.0, 10.0, 1e3] {
            let n = reg_step_from_model(&m, theta, 1.0, 1.0 / gamma).unwrap().norm();
            prop_assert!(n >= prev * (1.0 - 1e-10));
            prev = n;
        }
    }
}

#[test]
fn large_gamma_recovers_unregularized_step() {
    for seed in 0..20 {
        let m = random_model(&mut ChaCha8Rng::seed_from_u64(seed), &shape(5, 2, 2, 2, true));
        let theta = 0.5 / open_loop_curvature(&m);
        let dp = solve_leqg(&m, theta, 1.0, 0.0).unwrap();
        let dense = reg_step_from_model(&m, theta, 1.0, 1e-14).unwrap();
        assert!(rel_err(dp.v(), &dense) < 1e-8);
    }
}

#[test]
fn matches_monte_carlo_on_linear_systems() {
    for seed in 0..10 {
        let s = shape(3, 2, 2, 2, true);
        let (system, costs) = random_linear_problem(&mut ChaCha8Rng::seed_from_u64(seed), &s);
        let u = random_controls(seed, 3, 2);
        let m = system.linearize(&costs, &u).unwrap();
        let theta = 0.2 / open_loop_curvature(&m);
        let closed = surrogate_value(&system, &costs, &u, theta, 1.0).unwrap().value;
        let mc = mc_risk_value(&system, &costs, &u, theta, 1.0, 100_000, seed).unwrap();
        assert!(
            (closed - mc.value).abs() <= 3.0 * mc.std_error,
            "seed {seed}: closed {closed}, mc {} +- {}",
            mc.value,
            mc.std_error
        );
    }
}

#[test]
fn covariance_blows_up_near_the_threshold() {
    let s = shape(2, 2, 1, 1, true);
    let (system, costs) = random_linear_problem(&mut ChaCha8Rng::seed_from_u64(3), &s);
    let u = system.zero_controls();
    let lam = open_loop_curvature(&system.linearize(&costs, &u).unwrap());
    let mut prev = 0.0;
    for frac in [0.5, 0.9, 0.99, 0.999999] {
        let ga = gaussian_approx(&system, &costs, &u, frac / lam, 1.0).unwrap();
        let n = ga.xw.nrows();
        let trace = ga.covariance_solve(&nalgebra::DMatrix::identity(n, n)).trace();
        assert!(trace > prev);
        prev = trace;
    }
    assert!(prev > 1e4);
    assert_eq!(
        gaussian_approx(&system, &costs, &u, 1.0 / lam, 1.0).unwrap_err(),
        SurrogateError::ConditionViolated
    );
}

#[test]
fn zero_risk_is_noiseless_cost() {
    let s = shape(4, 2, 2, 2, true);
    let (system, costs) = random_linear_problem(&mut ChaCha8Rng::seed_from_u64(5), &s);
    let u = random_controls(5, 4, 2);
    let traj = system.rollout(&u, None).unwrap();
    let plain = costs.state_cost(&traj) + costs.control_cost(&u);
    // the log-det term tends to sigma^2 tr(K) / 2, so sigma has to vanish too
    for (theta, sigma) in [(1.0, 1e-6), (1e-12, 1e-6), (0.0, 1e-6)] {
        let ev = surrogate_value(&system, &costs, &u, theta, sigma).unwrap();
        assert!((ev.value - plain).abs() < 1e-9 * plain.abs().max(1.0));
    }
}

#[test]
fn closed_form_step_lands_on_dp_step() {
    let s = shape(6, 3, 2, 2, true);
    let (system, costs) = random_linear_problem(&mut ChaCha8Rng::seed_from_u64(9), &s);
    let u = random_controls(9, 6, 2);
    let m = system.linearize(&costs, &u).unwrap();
    let theta = 0.5 / open_loop_curvature(&m);
    let next = reg_step_closed_form(&system, &costs, &u, theta, 1.0, Some(2.0)).unwrap();
    let dp = solve_leqg(&m, theta, 1.0, 0.5).unwrap();
    assert!(rel_err(next.as_vector(), &u.offset(dp.v(), 1.0).into_vector()) < 1e-10);
}
