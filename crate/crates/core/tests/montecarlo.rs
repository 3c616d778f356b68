use ileqg::dynsys::systems::{pendulum_costs, pendulum_system, PendulumParams};
use ileqg::dynsys::trajectory_jacobian;
use ileqg::montecarlo::{
    mc_risk_gradient, mc_risk_runs, mc_risk_value, risk_aggregate, test_cost, KickScale, KickStage, TestCostOptions,
};
use ileqg::reference::{open_loop_curvature, random_linear_problem, InstanceShape};
use ileqg::surrogate::truncated_gradient;
use ileqg::ControlSequence;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn linear(seed: u64, tau: usize, d: usize, p: usize) -> (ileqg::DynamicalSystem, ileqg::StageCosts) {
    let shape = InstanceShape { horizon: tau, state_dim: d, control_dim: p, noise_dim: p, final_state_only: false, additive: true };
    random_linear_problem(&mut ChaCha8Rng::seed_from_u64(seed), &shape)
}

fn random_controls(seed: u64, tau: usize, p: usize, scale: f64) -> ControlSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ControlSequence::new(DVector::from_fn(tau * p, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }), p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_shift_adds_constant(
        costs in prop::collection::vec(-50.0f64..50.0, 1..40), c in -1e3f64..1e3, theta in 0.0f64..5.0,
    ) {
        let shifted: Vec<f64> = costs.iter().map(|x| x + c).collect();
        let (a, _, _) = risk_aggregate(&costs, theta);
        let (b, _, _) = risk_aggregate(&shifted, theta);
        prop_assert!((b - a - c).abs() <= 1e-9 * (1.0 + a.abs() + c.abs()));
    }

    #[test]
    fn aggregate_nondecreasing_in_theta(
        costs in prop::collection::vec(-50.0f64..50.0, 1..40), t1 in 0.0f64..5.0, t2 in 0.0f64..5.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (a, _, _) = risk_aggregate(&costs, lo);
        let (b, _, _) = risk_aggregate(&costs, hi);
        prop_assert!(b >= a - 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn aggregate_overflow_safe(costs in prop::collection::vec(1e5f64..1e6, 1..20), theta in 1.0f64..10.0) {
        let (v, se, _) = risk_aggregate(&costs, theta);
        prop_assert!(v.is_finite() && se.is_finite() && se >= 0.0);
        let max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v <= max + 1e-9 * max);
    }
}

#[test]
fn deterministic_across_thread_counts() {
    let (system, costs) = linear(1, 10, 3, 2);
    let u = random_controls(2, 10, 2, 0.5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let v = mc_risk_value(&system, &costs, &u, 0.1, 1.0, 3000, 77).unwrap();
            let g = mc_risk_gradient(&system, &costs, &u, 0.1, 1.0, 3000, 77).unwrap();
            let t = test_cost(&system, &costs, &u, 2.0, 3000, 77, &TestCostOptions::default()).unwrap();
            (v.value.to_bits(), v.std_error.to_bits(), g.gradient, t.mean.to_bits())
        })
    };
    assert_eq!(run(1), run(4));
    assert_eq!(run(1), run(1));
}

#[test]
fn zero_noise_is_exact() {
    let (system, costs) = linear(3, 6, 2, 2);
    let u = random_controls(4, 6, 2, 1.0);
    let traj = system.rollout(&u, None).unwrap();
    let exact = costs.state_cost(&traj) + costs.control_cost(&u);
    for theta in [0.0, 0.5, 3.0] {
        let est = mc_risk_value(&system, &costs, &u, theta, 0.0, 50, 1).unwrap();
        assert!((est.value - exact).abs() <= 1e-12 * exact.abs().max(1.0));
        assert_eq!(est.std_error, 0.0);
    }
}

#[test]
fn risk_neutral_is_plain_mean() {
    let (system, costs) = linear(5, 5, 2, 1);
    let u = random_controls(6, 5, 1, 1.0);
    let n = 2000;
    let plain = mc_risk_value(&system, &costs, &u, 0.0, 0.7, n, 9).unwrap();
    let tiny = mc_risk_value(&system, &costs, &u, 1e-11, 0.7, n, 9).unwrap();
    assert_eq!(plain.value, tiny.value);
    let near = mc_risk_value(&system, &costs, &u, 1e-7, 0.7, n, 9).unwrap();
    assert!((near.value - plain.value).abs() < 1e-4 * plain.value.abs().max(1.0));
}

#[test]
fn gradient_matches_truncated_gradient_on_linear_systems() {
    for seed in 0..5 {
        let (system, costs) = linear(seed, 4, 2, 2);
        let u = random_controls(seed + 100, 4, 2, 1.0);
        let m = system.linearize(&costs, &u).unwrap();
        let theta = 0.2 / open_loop_curvature(&m);
        let exact = truncated_gradient(&system, &costs, &u, theta, 1.0).unwrap();
        let mc = mc_risk_gradient(&system, &costs, &u, theta, 1.0, 10_000, seed).unwrap();
        for i in 0..exact.len() {
            let err = (mc.gradient[i] - exact[i]).abs();
            assert!(err <= 3.0 * mc.std_error[i] + 1e-12, "seed {seed} coord {i}: {err} vs se {}", mc.std_error[i]);
        }
    }
}

#[test]
fn gradient_matches_common_random_number_differences() {
    let tau = 20;
    let system = pendulum_system(PendulumParams::default(), 0.05, tau, DVector::zeros(2)).unwrap();
    let costs = pendulum_costs(0.1, 0.01, 0.05, tau, true).unwrap();
    let u = random_controls(8, tau, 1, 2.0);
    let dir = random_controls(9, tau, 1, 1.0).into_vector().normalize();
    let (theta, sigma, n, seed) = (0.5, 0.3, 10_000, 31);
    let g = mc_risk_gradient(&system, &costs, &u, theta, sigma, n, seed).unwrap();
    let h = 1e-5;
    let plus = mc_risk_value(&system, &costs, &u.offset(&dir, h), theta, sigma, n, seed).unwrap().value;
    let minus = mc_risk_value(&system, &costs, &u.offset(&dir, -h), theta, sigma, n, seed).unwrap().value;
    let fd = (plus - minus) / (2.0 * h);
    let analytic = g.gradient.dot(&dir);
    assert!((fd - analytic).abs() <= 1e-4 * analytic.abs(), "fd {fd} vs {analytic}");
}

#[test]
fn runs_use_distinct_streams() {
    let (system, costs) = linear(12, 4, 2, 1);
    let u = system.zero_controls();
    let runs = mc_risk_runs(&system, &costs, &u, 0.1, 1.0, 100, 10, 5).unwrap();
    assert_eq!(runs.len(), 10);
    for i in 1..runs.len() {
        assert_ne!(runs[i].value, runs[0].value);
    }
}

#[test]
fn test_cost_without_kick_is_noiseless_cost() {
    let (system, costs) = linear(13, 8, 2, 2);
    let u = random_controls(14, 8, 2, 1.0);
    let plain = costs.state_cost(&system.rollout(&u, None).unwrap());
    let tc = test_cost(&system, &costs, &u, 0.0, 25, 3, &TestCostOptions::default()).unwrap();
    assert_eq!(tc.mean, plain);
    assert_eq!(tc.std_error, 0.0);
    assert_eq!(tc.simulations, 25);
}

#[test]
fn test_cost_matches_gaussian_expectation_on_linear_systems() {
    // kick at a fixed stage t: E h = h(x) + s^2/2 tr(X_t H X_t')
    let (tau, p) = (6, 2);
    let (system, costs) = linear(15, tau, 3, p);
    let u = random_controls(16, tau, p, 1.0);
    let m = system.linearize(&costs, &u).unwrap();
    let x = trajectory_jacobian(&m);
    let h = m.stacked_state_hessian();
    let stage = 2;
    let xt = x.rows(stage * p, p).clone_owned();
    let (sigma_test, sigma0) = (1.5, 3.0);
    for (scale, s) in [(KickScale::Normalized, sigma_test / sigma0), (KickScale::Raw, sigma_test)] {
        let expected = m.state_cost + 0.5 * s * s * (&xt * &h * xt.transpose()).trace();
        let opts = TestCostOptions { sigma0, scale, stage: KickStage::Fixed(stage) };
        let tc = test_cost(&system, &costs, &u, sigma_test, 100_000, 17, &opts).unwrap();
        assert!((tc.mean - expected).abs() <= 3.0 * tc.std_error, "{} vs {expected} (se {})", tc.mean, tc.std_error);
    }
}

#[test]
fn test_cost_rejects_bad_input() {
    let (system, costs) = linear(18, 3, 1, 1);
    let u = system.zero_controls();
    assert!(test_cost(&system, &costs, &u, 1.0, 0, 0, &TestCostOptions::default()).is_err());
    let opts = TestCostOptions { stage: KickStage::Fixed(3), ..Default::default() };
    assert!(test_cost(&system, &costs, &u, 1.0, 10, 0, &opts).is_err());
}
