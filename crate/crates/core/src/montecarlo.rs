//! Monte-Carlo estimates of the risk-sensitive cost
//! `(1/theta) log E exp(theta h(x~(u, w))) + g(u)`, its gradient, and the
//! impulse-disturbance test cost.
//!
//! Sample `i` draws from ChaCha20 seeded with the base seed on stream `i`, so
//! results do not depend on thread count or scheduling. Reductions run in
//! sample order.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynsys::{ControlSequence, DynError, DynamicalSystem, NoiseSequence, StageCosts};

/// Below this `theta` the estimators use the plain sample mean.
pub const EXPECTED_COST_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("all {0} samples diverged")]
    AllDiverged(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Samples that entered the estimate.
    pub samples: usize,
    /// Samples dropped because the trajectory diverged.
    pub diverged: usize,
    pub seed: u64,
    /// `max_i theta h_i`, subtracted before exponentiating.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McGradient {
    pub gradient: DVector<f64>,
    pub std_error: DVector<f64>,
    pub samples: usize,
    pub diverged: usize,
}

/// Independent seed for sub-task `index` of a run seeded with `base` (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_noise(rng: &mut ChaCha20Rng, horizon: usize, dim: usize, sigma: f64) -> NoiseSequence {
    let data = DVector::from_fn(horizon * dim, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    NoiseSequence::new(data, dim).expect("noise dimension is positive")
}

fn check(theta: f64, sigma: f64, n: usize) -> Result<(), McError> {
    if !(theta >= 0.0 && theta.is_finite()) || !(sigma >= 0.0 && sigma.is_finite()) || n == 0 {
        return Err(McError::InvalidParameter(format!("theta = {theta}, sigma = {sigma}, N = {n}")));
    }
    Ok(())
}

/// Risk-sensitive aggregate of per-sample costs. Returns `(value, stderr, shift)`.
pub fn risk_aggregate(costs: &[f64], theta: f64) -> (f64, f64, f64) {
    let n = costs.len() as f64;
    if theta < EXPECTED_COST_THRESHOLD {
        let (mean, se) = mean_and_se(costs);
        return (mean, se, 0.0);
    }
    let shift = costs.iter().map(|c| theta * c).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = costs.iter().map(|c| (theta * c - shift).exp()).collect();
    let mean = e.iter().sum::<f64>() / n;
    let value = (shift + mean.ln()) / theta;
    let var = if e.len() > 1 { e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    // delta method on log of the exponential mean
    let se = (var / n).sqrt() / (mean * theta);
    (value, se, shift)
}

fn sample_costs(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Vec<Option<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let w = draw_noise(&mut rng, system.horizon(), system.noise_dim(), sigma);
            system.rollout(u, Some(&w)).ok().map(|traj| costs.state_cost(&traj)).filter(|c| c.is_finite())
        })
        .collect()
}

pub fn mc_risk_value(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<McEstimate, McError> {
    check(theta, sigma, n)?;
    let raw = sample_costs(system, costs, u, sigma, n, seed);
    let ok: Vec<f64> = raw.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(McError::AllDiverged(n));
    }
    let (value, std_error, shift) = risk_aggregate(&ok, theta);
    Ok(McEstimate {
        value: value + costs.control_cost(u),
        std_error,
        samples: ok.len(),
        diverged: n - ok.len(),
        seed,
        shift,
    })
}

/// `runs` independent estimates with seeds derived from `seed`; returns the
/// individual estimates.
#[allow(clippy::too_many_arguments)]
pub fn mc_risk_runs(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
    n: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<McEstimate>, McError> {
    (0..runs).map(|r| mc_risk_value(system, costs, u, theta, sigma, n, derive_seed(seed, r as u64))).collect()
}

/// Mean and standard error of the mean over a set of values.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // anchored at the first value so that constant samples give it back exactly
    let anchor = values[0];
    let mean = anchor + values.iter().map(|v| v - anchor).sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Gradient of the risk-sensitive cost: the `exp(theta h_i)`-weighted mean of
/// the per-sample gradients `grad_u h(x~(u, w_i))`, plus `grad g(u)`.
pub fn mc_risk_gradient(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    theta: f64,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<McGradient, McError> {
    check(theta, sigma, n)?;
    let samples: Vec<Option<(f64, DVector<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let w = draw_noise(&mut rng, system.horizon(), system.noise_dim(), sigma);
            system.state_cost_gradient(costs, u, Some(&w)).ok()
        })
        .collect();
    let ok: Vec<&(f64, DVector<f64>)> = samples.iter().flatten().collect();
    if ok.is_empty() {
        return Err(McError::AllDiverged(n));
    }
    let m = ok.len();
    let weights: Vec<f64> = if theta < EXPECTED_COST_THRESHOLD {
        vec![1.0; m]
    } else {
        let shift = ok.iter().map(|(c, _)| theta * c).fold(f64::NEG_INFINITY, f64::max);
        ok.iter().map(|(c, _)| (theta * c - shift).exp()).collect()
    };
    let wsum: f64 = weights.iter().sum();
    let dim = u.as_vector().len();
    let mut grad = DVector::zeros(dim);
    for (wt, (_, g)) in weights.iter().zip(&ok) {
        grad.axpy(*wt / wsum, g, 1.0);
    }
    // ratio-estimator standard error
    let wbar = wsum / m as f64;
    let mut var = DVector::zeros(dim);
    for (wt, (_, g)) in weights.iter().zip(&ok) {
        let dev = (g - &grad) * *wt;
        var += dev.component_mul(&dev);
    }
    let denom = if m > 1 { (m * (m - 1)) as f64 } else { f64::INFINITY };
    let std_error = var.map(|v| (v / denom).sqrt() / wbar);
    Ok(McGradient { gradient: grad + costs.control_gradient(u), std_error, samples: m, diverged: n - m })
}

/// How the kick amplitude relates to `sigma_test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KickScale {
    /// Standard deviation `sigma_test / sigma_0`.
    #[default]
    Normalized,
    /// Standard deviation `sigma_test`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "stage")]
pub enum KickStage {
    /// Uniform over `0..tau`.
    #[default]
    Uniform,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestCostOptions {
    pub sigma0: f64,
    pub scale: KickScale,
    pub stage: KickStage,
}

impl Default for TestCostOptions {
    fn default() -> Self {
        Self { sigma0: 1.0, scale: KickScale::Normalized, stage: KickStage::Uniform }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestCost {
    pub mean: f64,
    pub std_error: f64,
    pub simulations: usize,
    pub diverged: usize,
}

/// Mean state cost when the command is hit once by a random kick
/// `u_{t_w} + rho`, averaged over `n` simulations. Diverged simulations are
/// dropped and counted.
#[allow(clippy::too_many_arguments)]
pub fn test_cost(
    system: &DynamicalSystem,
    costs: &StageCosts,
    u: &ControlSequence,
    sigma_test: f64,
    n: usize,
    seed: u64,
    options: &TestCostOptions,
) -> Result<TestCost, McError> {
    if n == 0 || !(sigma_test >= 0.0) || !(options.sigma0 > 0.0) {
        return Err(McError::InvalidParameter(format!("n = {n}, sigma_test = {sigma_test}, sigma0 = {}", options.sigma0)));
    }
    let tau = system.horizon();
    if let KickStage::Fixed(t) = options.stage {
        if t >= tau {
            return Err(McError::InvalidParameter(format!("kick stage {t} outside horizon {tau}")));
        }
    }
    let std = match options.scale {
        KickScale::Normalized => sigma_test / options.sigma0,
        KickScale::Raw => sigma_test,
    };
    let p = system.control_dim();
    let results: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let tw = match options.stage {
                KickStage::Uniform => rng.random_range(0..tau),
                KickStage::Fixed(t) => t,
            };
            let mut kicked = u.clone();
            for j in 0..p {
                kicked.stage_mut(tw)[j] += std * rng.sample::<f64, _>(StandardNormal);
            }
            system.rollout(&kicked, None).ok().map(|traj| costs.state_cost(&traj)).filter(|c| c.is_finite())
        })
        .collect();
    let ok: Vec<f64> = results.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(McError::AllDiverged(n));
    }
    let (mean, std_error) = mean_and_se(&ok);
    Ok(TestCost { mean, std_error, simulations: ok.len(), diverged: n - ok.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_shift_invariance() {
        let c = [0.3, 1.7, -0.4, 2.2];
        let shifted: Vec<f64> = c.iter().map(|v| v + 5.0).collect();
        let (a, sa, _) = risk_aggregate(&c, 0.8);
        let (b, sb, _) = risk_aggregate(&shifted, 0.8);
        assert!((b - a - 5.0).abs() < 1e-12);
        assert!((sa - sb).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_monotone_in_theta() {
        let c = [0.3, 1.7, -0.4, 2.2, 0.0];
        let mut last = f64::NEG_INFINITY;
        for k in 0..20 {
            let (v, _, _) = risk_aggregate(&c, k as f64 * 0.25);
            assert!(v >= last - 1e-12);
            last = v;
        }
    }

    #[test]
    fn aggregate_handles_huge_costs() {
        let (v, _, _) = risk_aggregate(&[1e6, 1e6 + 1.0], 10.0);
        assert!(v.is_finite());
        assert!(v > 1e6 && v < 1e6 + 1.0);
    }

    #[test]
    fn seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
