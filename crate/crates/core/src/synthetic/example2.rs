//! Two-stage design with a scalar state per stage.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    draw_action, pad_uniform, threshold_policy, ScenarioSpec, ScenarioTruth, SequentialDesign, TargetKind, HIGH_DIM,
};
use crate::data::TrajectoryDataset;
use crate::policy::{sigmoid, AnalyticPolicy, SharedPolicy};
use crate::rng::StreamRng;

/// In the high-dimensional variant the stage-1 state is padded with null
/// features to dimension 100; the stage-2 state stays scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Example2 {
    pub high_dim: bool,
}

impl Example2 {
    pub fn new(high_dim: bool) -> Self {
        Self { high_dim }
    }

    pub fn stage1_dim(&self) -> usize {
        if self.high_dim {
            HIGH_DIM
        } else {
            1
        }
    }

    /// Outcome given `(x1, t1, x2, t2)` and standard normal noise.
    pub fn outcome(x1: f64, t1: usize, x2: f64, t2: usize, eps: f64) -> f64 {
        let (t1, t2) = (t1 as f64, t2 as f64);
        let mean = 1.0 + x1 + t1 * (1.0 - 3.0 * (x1 - 0.2).powi(2)) + x2 + t2 * (1.0 - 5.0 * (x2 - 0.4).powi(2));
        mean + Self::noise_multiplier(x1, t1, x2, t2) * eps
    }

    /// May be negative; only its magnitude matters because the noise is
    /// symmetric.
    pub fn noise_multiplier(x1: f64, t1: f64, x2: f64, t2: f64) -> f64 {
        1.0 + 0.5 * t1 - t1 * x1 + 0.5 * t2 - t2 * x2
    }

    fn target_score(stage: usize, h: &[f64]) -> f64 {
        if stage == 0 {
            0.5 * h[0] - 0.5
        } else {
            0.5 * h[h.len() - 1] - 1.0
        }
    }
}

impl SequentialDesign for Example2 {
    fn horizon(&self) -> usize {
        2
    }

    fn behavior_policies(&self) -> Vec<SharedPolicy> {
        vec![
            AnalyticPolicy::binary(|h| sigmoid(-0.5 + h[0])).shared(),
            AnalyticPolicy::binary(|h| sigmoid(-0.5 - h[h.len() - 1])).shared(),
        ]
    }

    fn target_policies(&self, kind: TargetKind) -> Vec<SharedPolicy> {
        (0..2)
            .map(|k| match kind {
                TargetKind::Stochastic => AnalyticPolicy::binary(move |h| sigmoid(Self::target_score(k, h))).shared(),
                TargetKind::Deterministic => threshold_policy(move |h| Self::target_score(k, h)),
            })
            .collect()
    }

    fn generate_under(&self, n: usize, policies: &[SharedPolicy], rng: &mut StreamRng) -> TrajectoryDataset {
        let d1 = self.stage1_dim();
        let mut s1 = Vec::with_capacity(n * d1);
        let mut s2 = Vec::with_capacity(n);
        let mut a1 = Vec::with_capacity(n);
        let mut a2 = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(d1 + 2);
        for _ in 0..n {
            h.clear();
            pad_uniform(&mut h, d1, rng);
            let x1 = h[0];
            let t1 = draw_action(policies[0].as_ref(), &h, rng);
            let x2 = x1 + rng.random::<f64>();
            s1.extend_from_slice(&h);
            h.push(t1 as f64);
            h.push(x2);
            let t2 = draw_action(policies[1].as_ref(), &h, rng);
            let eps: f64 = rng.sample(StandardNormal);
            y.push(Self::outcome(x1, t1, x2, t2, eps));
            s2.push(x2);
            a1.push(t1);
            a2.push(t2);
        }
        let states = vec![
            Array2::from_shape_vec((n, d1), s1).expect("shape"),
            Array2::from_shape_vec((n, 1), s2).expect("shape"),
        ];
        TrajectoryDataset::new(states, vec![a1, a2], y, 2).expect("generator output is valid")
    }

    fn truth(&self, spec: ScenarioSpec) -> ScenarioTruth {
        let target = match spec.target {
            TargetKind::Stochastic => vec![
                "P(E1=1|h) = sigmoid(0.5 x1 - 0.5)".to_string(),
                "P(E2=1|h) = sigmoid(0.5 x2 - 1)".to_string(),
            ],
            TargetKind::Deterministic => vec!["E1 = 1[0.5 x1 - 0.5 > 0]".into(), "E2 = 1[0.5 x2 - 1 > 0]".into()],
        };
        ScenarioTruth {
            scenario: spec,
            state_dims: vec![self.stage1_dim(), 1],
            behavior: vec![
                "P(T1=1|h) = sigmoid(-0.5 + x1)".into(),
                "P(T2=1|h) = sigmoid(-0.5 - x2)".into(),
            ],
            target,
            outcome: "x1 ~ U(0, 1); x2 ~ U(x1, x1 + 1); Y = 1 + x1 + T1*(1 - 3(x1 - 0.2)^2) + x2 \
                      + T2*(1 - 5(x2 - 0.4)^2) + (1 + 0.5T1 - T1 x1 + 0.5T2 - T2 x2)*eps, eps ~ N(0, 1)"
                .into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn formula_values() {
        assert_abs_diff_eq!(Example2::outcome(0.2, 1, 0.4, 1, 0.0), 3.6, epsilon = 1e-12);
        assert_abs_diff_eq!(Example2::noise_multiplier(0.9, 1.0, 1.9, 1.0), -0.8, epsilon = 1e-12);
    }

    #[test]
    fn supports_and_history_layout() {
        let ex = Example2::new(false);
        let data = ex.generate(5000, &mut stream(1, 0, "data"));
        for i in 0..data.len() {
            let x1 = data.states(0)[[i, 0]];
            let x2 = data.states(1)[[i, 0]];
            assert!(x1 < x2 && x2 < x1 + 1.0);
        }
        // Stage-2 history is (x1, 1[t1 = 1], x2).
        let mut h = Vec::new();
        data.history_into(3, 1, &mut h);
        assert_eq!(h, vec![data.states(0)[[3, 0]], data.actions(0)[3] as f64, data.states(1)[[3, 0]]]);
        let hd = Example2::new(true).generate(10, &mut stream(1, 0, "data"));
        assert_eq!(hd.stage_dim(0), 100);
        assert_eq!(hd.stage_dim(1), 1);
    }

    #[test]
    fn moments_match() {
        let n = 1_000_000;
        let data = Example2::new(false).generate(n, &mut stream(2, 0, "data"));
        let nf = n as f64;
        let x1m = data.states(0).column(0).sum() / nf;
        assert!((x1m - 0.5).abs() < 4.0 * (1.0 / 12.0 / nf).sqrt());
        let pol = Example2::new(false).behavior_policies();
        let mut expected = 0.0;
        for i in 0..n {
            expected += pol[0].probability(&[data.states(0)[[i, 0]]], 1);
        }
        expected /= nf;
        let rate = data.actions(0).iter().sum::<usize>() as f64 / nf;
        assert!((rate - expected).abs() < 4.0 * (expected * (1.0 - expected) / nf).sqrt());
    }
}
