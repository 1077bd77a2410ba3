//! Single-stage design with four uniform covariates and a binary action.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{draw_action, pad_uniform, ScenarioSpec, ScenarioTruth, TargetKind, TestSample, HIGH_DIM};
use crate::conformal::{DensityModel, FnDensity};
use crate::data::BanditDataset;
use crate::policy::{sigmoid, AnalyticPolicy, DeterministicPolicy, Policy, SharedPolicy};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Example1 {
    pub high_dim: bool,
}

impl Example1 {
    pub const BASE_DIM: usize = 4;

    pub fn new(high_dim: bool) -> Self {
        Self { high_dim }
    }

    pub fn dim(&self) -> usize {
        if self.high_dim {
            HIGH_DIM
        } else {
            Self::BASE_DIM
        }
    }

    fn base_sum(x: &[f64]) -> f64 {
        x[..4].iter().sum()
    }

    /// `P(T = 1 | x) = sigmoid(-0.5 - 0.5 sum x)`.
    pub fn behavior_policy() -> SharedPolicy {
        AnalyticPolicy::binary(|x| sigmoid(-0.5 - 0.5 * Self::base_sum(x))).shared()
    }

    fn target_score(x: &[f64]) -> f64 {
        -0.5 + x[0] + x[1] - x[2] - x[3]
    }

    /// Stochastic: `sigmoid(-0.5 + x1 + x2 - x3 - x4)`. Deterministic: always
    /// treat.
    pub fn target_policy(kind: TargetKind) -> SharedPolicy {
        match kind {
            TargetKind::Stochastic => AnalyticPolicy::binary(|x| sigmoid(Self::target_score(x))).shared(),
            TargetKind::Deterministic => DeterministicPolicy::new(2, |_| 1).shared(),
        }
    }

    /// Conditional mean of the arm-`t` potential outcome.
    pub fn mean(t: usize, x: &[f64]) -> f64 {
        let base = 1.0 + x[0] - x[1] + x[2].powi(3) + x[3].exp();
        if t == 1 {
            base + 3.0 - 5.0 * x[0] + 2.0 * x[1] - 3.0 * x[2] + x[3]
        } else {
            base
        }
    }

    /// Conditional standard deviation of the arm-`t` potential outcome.
    pub fn scale(t: usize, x: &[f64]) -> f64 {
        (1.0 + t as f64) * (1.0 + Self::base_sum(x))
    }

    pub fn outcome(t: usize, x: &[f64], eps: f64) -> f64 {
        Self::mean(t, x) + Self::scale(t, x) * eps
    }

    fn arm(t: usize, x: &[f64]) -> Normal {
        Normal::new(Self::mean(t, x), Self::scale(t, x)).expect("positive scale")
    }

    /// Density of the arm-`t` potential outcome at `y`.
    pub fn density(t: usize, x: &[f64], y: f64) -> f64 {
        Self::arm(t, x).pdf(y)
    }

    pub fn cdf(t: usize, x: &[f64], y: f64) -> f64 {
        Self::arm(t, x).cdf(y)
    }

    /// Misspecified arm density: the same location-scale model with
    /// uniform(0, 1) noise in place of the standard normal, i.e. uniform on
    /// `[mean, mean + scale]`.
    pub fn misspecified_density(t: usize, x: &[f64], y: f64) -> f64 {
        let (m, s) = (Self::mean(t, x), Self::scale(t, x));
        if (m..=m + s).contains(&y) {
            1.0 / s
        } else {
            0.0
        }
    }

    /// Per-arm oracle densities for the direct method.
    pub fn oracle_density_model() -> Arc<dyn DensityModel> {
        Arc::new(FnDensity::new(2, Self::density))
    }

    pub fn misspecified_density_model() -> Arc<dyn DensityModel> {
        Arc::new(FnDensity::new(2, Self::misspecified_density))
    }

    /// Draw one context row (base covariates then null padding).
    fn context(&self, rng: &mut StreamRng, row: &mut Vec<f64>) {
        row.clear();
        pad_uniform(row, Self::BASE_DIM, rng);
        if self.high_dim {
            pad_uniform(row, HIGH_DIM - Self::BASE_DIM, rng);
        }
    }

    /// `n` rows with actions drawn from `policy`.
    pub fn generate_under(&self, n: usize, policy: &dyn Policy, rng: &mut StreamRng) -> BanditDataset {
        let d = self.dim();
        let mut flat = Vec::with_capacity(n * d);
        let mut actions = Vec::with_capacity(n);
        let mut outcomes = Vec::with_capacity(n);
        let mut row = Vec::with_capacity(d);
        for _ in 0..n {
            self.context(rng, &mut row);
            let t = draw_action(policy, &row, rng);
            let eps: f64 = rng.sample(StandardNormal);
            outcomes.push(Self::outcome(t, &row, eps));
            actions.push(t);
            flat.extend_from_slice(&row);
        }
        let contexts = Array2::from_shape_vec((n, d), flat).expect("shape");
        BanditDataset::new(contexts, actions, outcomes, 2).expect("generator output is valid")
    }

    /// Logged data under the behavior policy.
    pub fn generate(&self, n: usize, rng: &mut StreamRng) -> BanditDataset {
        self.generate_under(n, Self::behavior_policy().as_ref(), rng)
    }

    pub fn test_sample(&self, n: usize, kind: TargetKind, rng: &mut StreamRng) -> TestSample {
        let data = self.generate_under(n, Self::target_policy(kind).as_ref(), rng);
        TestSample {
            contexts: data.contexts().to_owned(),
            outcomes: data.outcomes().to_vec(),
        }
    }

    /// CDF of the target-policy outcome at `x`: the mixture
    /// `sum_t pi_e(t|x) F_t(y|x)`.
    pub fn mixture_cdf(target: &dyn Policy, x: &[f64], y: f64) -> f64 {
        let w = target.probabilities(x);
        (0..2).map(|t| w[t] * Self::cdf(t, x, y)).sum()
    }

    /// Quantile of the target-policy outcome at `x` by bisection.
    pub fn oracle_quantile(target: &dyn Policy, x: &[f64], level: f64) -> f64 {
        let w = target.probabilities(x);
        let arms: Vec<usize> = (0..2).filter(|&t| w[t] > 0.0).collect();
        if arms.len() == 1 {
            return Self::arm(arms[0], x).inverse_cdf(level);
        }
        let mut lo = arms
            .iter()
            .map(|&t| Self::mean(t, x) - 40.0 * Self::scale(t, x))
            .fold(f64::INFINITY, f64::min);
        let mut hi = arms
            .iter()
            .map(|&t| Self::mean(t, x) + 40.0 * Self::scale(t, x))
            .fold(f64::NEG_INFINITY, f64::max);
        while hi - lo > 1e-10 * (1.0 + lo.abs().max(hi.abs())) {
            let mid = 0.5 * (lo + hi);
            if Self::mixture_cdf(target, x, mid) < level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn oracle_quantiles(target: &dyn Policy, x: &[f64], levels: (f64, f64)) -> (f64, f64) {
        (
            Self::oracle_quantile(target, x, levels.0),
            Self::oracle_quantile(target, x, levels.1),
        )
    }

    pub fn truth(&self, spec: ScenarioSpec) -> ScenarioTruth {
        let target = match spec.target {
            TargetKind::Stochastic => "P(E=1|x) = sigmoid(-0.5 + x1 + x2 - x3 - x4)",
            TargetKind::Deterministic => "E = 1",
        };
        ScenarioTruth {
            scenario: spec,
            state_dims: vec![self.dim()],
            behavior: vec!["P(T=1|x) = sigmoid(-0.5 - 0.5 * (x1 + x2 + x3 + x4))".into()],
            target: vec![target.into()],
            outcome: "Y = 1 + x1 - x2 + x3^3 + exp(x4) + T*(3 - 5x1 + 2x2 - 3x3 + x4) \
                      + (1 + T)*(1 + x1 + x2 + x3 + x4)*eps, eps ~ N(0, 1); x1..x4 ~ U(0, 1), \
                      remaining coordinates are independent U(0, 1) nulls"
                .into(),
        }
    }
}
