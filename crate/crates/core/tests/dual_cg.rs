use ileqg::dual_cg::{conjgrad, dual_solve_final_state, dual_step_from_model, DualError, JacobianOracle};
use ileqg::dynsys::systems::{pendulum_costs, pendulum_system, PendulumParams};
use ileqg::leqg::solve_leqg;
use ileqg::linalg::rel_err;
use ileqg::reference::{gauss_newton_step, open_loop_curvature, random_model, DenseGame, InstanceShape};
use ileqg::surrogate::reg_step_from_model;
use ileqg::{ControlSequence, LinearizedModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn final_state_model(seed: u64, tau: usize, d: usize, p: usize) -> LinearizedModel {
    let shape = InstanceShape { horizon: tau, state_dim: d, control_dim: p, noise_dim: p, final_state_only: true, additive: true };
    random_model(&mut ChaCha8Rng::seed_from_u64(seed), &shape)
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_products_are_adjoint(seed in any::<u64>(), tau in 1usize..=8, d in 1usize..=4, p in 1usize..=3) {
        let m = final_state_model(seed, tau, d, p);
        let oracle = JacobianOracle::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(!seed);
        let (z, v, w) = (randv(&mut rng, d), randv(&mut rng, tau * p), randv(&mut rng, tau * p));
        let lhs_u = z.dot(&oracle.jvp_u(&v));
        let rhs_u = oracle.vjp_u(&z).dot(&v);
        prop_assert!((lhs_u - rhs_u).abs() <= 1e-10 * lhs_u.abs().max(rhs_u.abs()).max(1e-300));
        let lhs_w = z.dot(&oracle.jvp_w(&w));
        let rhs_w = oracle.vjp_w(&z).dot(&w);
        prop_assert!((lhs_w - rhs_w).abs() <= 1e-10 * lhs_w.abs().max(rhs_w.abs()).max(1e-300));
    }

    #[test]
    fn dual_step_matches_dp_and_dense(
        seed in any::<u64>(), tau in 1usize..=10, d in 1usize..=4, p in 1usize..=3,
        frac in 0.0f64..0.9, prox in prop_oneof![Just(0.0), 0.01f64..4.0],
    ) {
        let m = final_state_model(seed, tau, d, p);
        let theta = frac / open_loop_curvature(&m).max(1e-9);
        let dual = dual_step_from_model(&m, theta, 1.0, prox).unwrap();
        let dp = solve_leqg(&m, theta, 1.0, prox).unwrap();
        let dense = reg_step_from_model(&m, theta, 1.0, prox).unwrap();
        prop_assert!(rel_err(&dual.v, dp.v()) < 1e-6, "dual vs dp {}", rel_err(&dual.v, dp.v()));
        prop_assert!(rel_err(&dual.v, &dense) < 1e-6);
        prop_assert!(dual.oracle_calls <= 10 * d + 1, "{} calls for d = {d}", dual.oracle_calls);
    }

    #[test]
    fn dual_optimum_zeroes_model_gradient(
        seed in any::<u64>(), tau in 1usize..=5, d in 1usize..=3, p in 1usize..=3, frac in 0.0f64..0.9,
    ) {
        let m = final_state_model(seed, tau, d, p);
        let theta = frac / open_loop_curvature(&m).max(1e-9);
        let prox = 0.25;
        let dual = dual_step_from_model(&m, theta, 1.0, prox).unwrap();
        let game = DenseGame::assemble(&m, theta, 1.0, prox);
        // adversary's best response to the returned command
        let (nv, nw) = (game.n_v, game.n_w);
        let hww = game.m.view((nv, nv), (nw, nw)).clone_owned();
        let hwv = game.m.view((nv, 0), (nw, nv)).clone_owned();
        let cw = game.c.rows(nv, nw).clone_owned();
        let w = if theta > 0.0 { -hww.lu().solve(&(hwv * &dual.v + cw)).unwrap() } else { DVector::zeros(nw) };
        let grad = game.gradient(&dual.v, &w);
        prop_assert!(grad.norm() < 1e-8 * game.scale(), "{}", grad.norm());
    }
}

#[test]
fn risk_neutral_dual_is_gauss_newton() {
    for seed in 0..30 {
        let m = final_state_model(seed, 6, 3, 2);
        for prox in [0.0, 0.5] {
            let dual = dual_step_from_model(&m, 0.0, 1.0, prox).unwrap();
            let gn = gauss_newton_step(&m, prox).unwrap();
            assert!(rel_err(&dual.v, &gn) < 1e-8);
        }
    }
}

#[test]
fn single_stage_feasibility_agrees_with_dp() {
    for seed in 0..200u64 {
        let m = final_state_model(seed, 1, 1 + (seed % 3) as usize, 1 + (seed % 2) as usize);
        let lam = open_loop_curvature(&m);
        for frac in [0.5, 0.99, 1.01, 2.0] {
            let theta = frac / lam;
            let dual_ok = dual_step_from_model(&m, theta, 1.0, 0.0).is_ok();
            let dp_ok = solve_leqg(&m, theta, 1.0, 0.0).is_ok();
            assert_eq!(dual_ok, dp_ok, "seed {seed} frac {frac}");
        }
    }
}

#[test]
fn dual_feasible_implies_dp_feasible() {
    for seed in 0..200u64 {
        let m = final_state_model(seed, 4, 2, 1);
        let lam = open_loop_curvature(&m);
        for frac in [0.5, 0.99, 1.01, 2.0] {
            match dual_step_from_model(&m, frac / lam, 1.0, 0.0) {
                Ok(_) => assert!(solve_leqg(&m, frac / lam, 1.0, 0.0).is_ok()),
                Err(e) => assert!(matches!(e, DualError::Infeasible), "{e:?}"),
            }
        }
    }
}

#[test]
fn cg_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let l: DMatrix<f64> = DMatrix::from_fn(50, 50, |_, _| StandardNormal.sample(&mut rng));
    let a = &l * l.transpose() + DMatrix::identity(50, 50);
    let b = randv(&mut rng, 50);
    let res = conjgrad(|x| &a * x, &b, 1e-14, 500).unwrap();
    let direct = a.clone().lu().solve(&b).unwrap();
    assert!((res.solution - &direct).amax() < 1e-8 * direct.amax());
}

#[test]
fn pendulum_steps_agree() {
    let tau = 100;
    let params = PendulumParams::default();
    let system = pendulum_system(params, 0.05, tau, DVector::zeros(2)).unwrap();
    let costs = pendulum_costs(0.1, 0.01, 0.05, tau, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..5 {
        let u = ControlSequence::new(randv(&mut rng, tau) * (0.5 * k as f64), 1).unwrap();
        let m = system.linearize(&costs, &u).unwrap();
        let theta = 0.5 / open_loop_curvature(&m);
        let (next, step) = dual_solve_final_state(&system, &costs, &u, theta, 1.0, Some(16.0)).unwrap();
        let dp = solve_leqg(&m, theta, 1.0, 1.0 / 16.0).unwrap();
        assert!(rel_err(&step.v, dp.v()) < 1e-6);
        assert!(rel_err(next.as_vector(), &u.offset(dp.v(), 1.0).into_vector()) < 1e-6);
        assert!(step.oracle_calls <= 21);
    }
}

#[test]
fn oracle_call_bookkeeping() {
    let m = final_state_model(21, 5, 3, 2);
    let oracle = JacobianOracle::new(&m);
    let z = DVector::from_element(3, 1.0);
    let (a, b) = oracle.vjp_joint(&z);
    let _ = oracle.jvp_joint(&a, &b);
    assert_eq!(oracle.calls(), 2, "one dual gradient");

    let theta = 0.5 / open_loop_curvature(&m);
    let risky = dual_step_from_model(&m, theta, 1.0, 0.1).unwrap();
    assert_eq!(risky.oracle_calls, 2 + 2 * risky.cg_iterations + 2 * 3 + 1);
    let neutral = dual_step_from_model(&m, 0.0, 1.0, 0.1).unwrap();
    assert_eq!(neutral.oracle_calls, 2 + 2 * neutral.cg_iterations + 1);
}
