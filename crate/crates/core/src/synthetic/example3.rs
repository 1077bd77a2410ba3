//! Multi-stage design with autoregressive scalar states.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{draw_action, threshold_policy, ScenarioSpec, ScenarioTruth, SequentialDesign, TargetKind};
use crate::data::TrajectoryDataset;
use crate::policy::{sigmoid, AnalyticPolicy, SharedPolicy};
use crate::rng::StreamRng;

/// Policies depend on the current state only, which is the last entry of the
/// flattened history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example3 {
    pub horizon: usize,
}

impl Example3 {
    pub fn new(horizon: usize) -> Self {
        Self { horizon }
    }

    pub fn next_state(prev: f64, action: usize, eps: f64) -> f64 {
        0.5 * prev + 0.1 * action as f64 + 0.5 * eps
    }

    fn current(h: &[f64]) -> f64 {
        h[h.len() - 1]
    }
}

impl SequentialDesign for Example3 {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn behavior_policies(&self) -> Vec<SharedPolicy> {
        (0..self.horizon)
            .map(|_| AnalyticPolicy::binary(|h| sigmoid(-0.5 + Self::current(h))).shared())
            .collect()
    }

    fn target_policies(&self, kind: TargetKind) -> Vec<SharedPolicy> {
        (0..self.horizon)
            .map(|_| match kind {
                TargetKind::Stochastic => AnalyticPolicy::binary(|h| sigmoid(-0.5 + 0.5 * Self::current(h))).shared(),
                TargetKind::Deterministic => threshold_policy(|h| -0.5 + 0.5 * Self::current(h)),
            })
            .collect()
    }

    fn generate_under(&self, n: usize, policies: &[SharedPolicy], rng: &mut StreamRng) -> TrajectoryDataset {
        let m = self.horizon;
        let mut states = vec![Vec::with_capacity(n); m];
        let mut actions = vec![Vec::with_capacity(n); m];
        let mut y = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(2 * m);
        for _ in 0..n {
            h.clear();
            let eps: f64 = rng.sample(StandardNormal);
            let mut x = 0.5 * eps;
            for k in 0..m {
                if k > 0 {
                    let eps: f64 = rng.sample(StandardNormal);
                    let prev_action = actions[k - 1][actions[k - 1].len() - 1];
                    x = Self::next_state(x, prev_action, eps);
                    h.push(prev_action as f64);
                }
                h.push(x);
                states[k].push(x);
                actions[k].push(draw_action(policies[k].as_ref(), &h, rng));
            }
            y.push(x);
        }
        let states = states
            .into_iter()
            .map(|s| Array2::from_shape_vec((n, 1), s).expect("shape"))
            .collect();
        TrajectoryDataset::new(states, actions, y, 2).expect("generator output is valid")
    }

    fn truth(&self, spec: ScenarioSpec) -> ScenarioTruth {
        let target = match spec.target {
            TargetKind::Stochastic => "P(D_k=1|h) = sigmoid(-0.5 + 0.5 x_k)",
            TargetKind::Deterministic => "D_k = 1[-0.5 + 0.5 x_k > 0]",
        };
        ScenarioTruth {
            scenario: spec,
            state_dims: vec![1; self.horizon],
            behavior: vec!["P(T_k=1|h) = sigmoid(-0.5 + x_k)".into(); self.horizon],
            target: vec![target.into(); self.horizon],
            outcome: format!(
                "x_1 = 0.5 eps_1; x_k = 0.5 x_(k-1) + 0.1 T_(k-1) + 0.5 eps_k; Y = x_{}; eps_k ~ N(0, 1)",
                self.horizon
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::DeterministicPolicy;
    use crate::rng::stream;

    #[test]
    fn recursion_by_hand() {
        let x2 = Example3::next_state(0.0, 1, 0.0);
        let x3 = Example3::next_state(x2, 1, 0.0);
        assert!((x2 - 0.1).abs() < 1e-15 && (x3 - 0.15).abs() < 1e-15);
        assert_eq!(Example3::next_state(0.0, 0, 0.0), 0.0);
    }

    #[test]
    fn layout_and_outcome() {
        let ex = Example3::new(4);
        let data = ex.generate(100, &mut stream(1, 0, "data"));
        assert_eq!(data.horizon(), 4);
        for i in 0..100 {
            assert_eq!(data.outcomes()[i], data.states(3)[[i, 0]]);
        }
    }

    #[test]
    fn state_variance_without_treatment() {
        // With T = 0 throughout, Var(x_k) = 0.25 Var(x_(k-1)) + 0.25 and
        // Var(x_1) = 0.25.
        let never: Vec<SharedPolicy> = (0..5).map(|_| DeterministicPolicy::new(2, |_| 0).shared()).collect();
        let n = 1_000_000;
        let data = Example3::new(5).generate_under(n, &never, &mut stream(2, 0, "data"));
        let mut var = 0.25;
        for k in 0..5 {
            let col = data.states(k).column(0).to_vec();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            // Var of the sample variance for a Gaussian is 2 var^2 / n.
            assert!((v - var).abs() < 4.0 * (2.0 * var * var / n as f64).sqrt(), "stage {k}: {v} vs {var}");
            var = 0.25 * var + 0.25;
        }
    }
}
