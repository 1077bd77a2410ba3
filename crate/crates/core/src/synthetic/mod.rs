//! Simulation designs with known truth.
//!
//! Each example exposes its behavior and target policies, a data generator,
//! and a test-sample generator that rolls contexts forward under the target
//! policy and records the realized outcome.

mod example1;
mod example2;
mod example3;

pub use example1::Example1;
pub use example2::Example2;
pub use example3::Example3;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrajectoryDataset;
use crate::policy::{DeterministicPolicy, Policy, SharedPolicy};
use crate::propensity::draw;
use crate::rng::StreamRng;

/// Total state dimension of the high-dimensional variants.
pub const HIGH_DIM: usize = 100;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown example {0}; expected 1, 2 or 3")]
    UnknownExample(u8),
    #[error("example 3 horizon must be 3, 4 or 5 (got {0})")]
    BadHorizon(usize),
    #[error("example {0} has no high-dimensional variant")]
    NoHighDim(u8),
    #[error("n must be positive")]
    Empty,
}

/// Which target policy a scenario evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub example: u8,
    pub n: usize,
    #[serde(default)]
    pub high_dim: bool,
    /// Example 3 only.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub target: TargetKind,
}

impl ScenarioSpec {
    pub fn example1(n: usize, high_dim: bool) -> Self {
        Self {
            example: 1,
            n,
            high_dim,
            horizon: None,
            target: TargetKind::Stochastic,
        }
    }

    pub fn example2(n: usize, high_dim: bool) -> Self {
        Self {
            example: 2,
            ..Self::example1(n, high_dim)
        }
    }

    pub fn example3(n: usize, horizon: usize) -> Self {
        Self {
            example: 3,
            horizon: Some(horizon),
            ..Self::example1(n, false)
        }
    }

    pub fn with_target(mut self, target: TargetKind) -> Self {
        self.target = target;
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n == 0 {
            return Err(ScenarioError::Empty);
        }
        match self.example {
            1 | 2 => Ok(()),
            3 => {
                if self.high_dim {
                    return Err(ScenarioError::NoHighDim(3));
                }
                match self.horizon {
                    Some(h @ 3..=5) => {
                        let _ = h;
                        Ok(())
                    }
                    other => Err(ScenarioError::BadHorizon(other.unwrap_or(0))),
                }
            }
            e => Err(ScenarioError::UnknownExample(e)),
        }
    }

    pub fn is_sequential(&self) -> bool {
        self.example != 1
    }

    pub fn label(&self) -> String {
        match self.example {
            3 => format!("example3-h{}", self.horizon.unwrap_or(0)),
            e => format!("example{e}-{}", if self.high_dim { "high" } else { "low" }),
        }
    }
}

/// Contexts (initial states for multi-stage designs) and realized outcomes
/// under the target policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub contexts: Array2<f64>,
    pub outcomes: Vec<f64>,
}

impl TestSample {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

/// Human-readable description of a scenario's generating process, written
/// next to simulated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub scenario: ScenarioSpec,
    pub state_dims: Vec<usize>,
    pub behavior: Vec<String>,
    pub target: Vec<String>,
    pub outcome: String,
}

/// Common interface over the multi-stage designs.
pub trait SequentialDesign: Sync {
    fn horizon(&self) -> usize;

    /// Stage policies of the logging process, indexed by stage, acting on
    /// flattened histories.
    fn behavior_policies(&self) -> Vec<SharedPolicy>;

    fn target_policies(&self, kind: TargetKind) -> Vec<SharedPolicy>;

    /// Roll out `n` trajectories with actions from `policies`.
    fn generate_under(&self, n: usize, policies: &[SharedPolicy], rng: &mut StreamRng) -> TrajectoryDataset;

    fn generate(&self, n: usize, rng: &mut StreamRng) -> TrajectoryDataset {
        self.generate_under(n, &self.behavior_policies(), rng)
    }

    fn test_sample(&self, n: usize, kind: TargetKind, rng: &mut StreamRng) -> TestSample {
        let data = self.generate_under(n, &self.target_policies(kind), rng);
        TestSample {
            contexts: data.initial_states().to_owned(),
            outcomes: data.outcomes().to_vec(),
        }
    }

    fn truth(&self, spec: ScenarioSpec) -> ScenarioTruth;
}

/// Draw one action from `policy` at `history` with a single uniform.
pub(crate) fn draw_action(policy: &dyn Policy, history: &[f64], rng: &mut StreamRng) -> usize {
    let probs = policy.probabilities(history);
    draw(&probs, rng.random::<f64>())
}

/// Binary policy thresholding `score(h) > 0`.
pub(crate) fn threshold_policy(score: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> SharedPolicy {
    DeterministicPolicy::new(2, move |h| usize::from(score(h) > 0.0)).shared()
}

/// Push `d` uniform(0,1) null features.
pub(crate) fn pad_uniform(row: &mut Vec<f64>, d: usize, rng: &mut StreamRng) {
    row.extend((0..d).map(|_| rng.random::<f64>()));
}
