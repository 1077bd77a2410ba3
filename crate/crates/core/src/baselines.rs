//! Kernel-smoothed importance-sampling and doubly-robust confidence
//! intervals for the conditional mean `E[Y^{pi_e} | X = x]`.
//!
//! These target the mean, not the outcome; they are comparators whose
//! coverage of realized outcomes is expected to fall short.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{BanditDataset, TrajectoryDataset};
use crate::forest::{ForestConfig, ForestError, QuantileForest};
use crate::policy::{Policy, SharedPolicy, POSITIVITY_FLOOR};
use crate::rng::{derive_seed, purpose};

/// Bandwidth multipliers (times each feature's standard deviation) searched
/// when tuning.
pub const BANDWIDTH_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no kernel mass near the query point")]
    DegenerateNeighborhood,
    #[error(transparent)]
    Forest(#[from] ForestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Bandwidth `h_j = scale * sd_j` per feature (Gaussian product kernel).
    pub scale: f64,
    pub alpha: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { scale: 0.2, alpha: 0.1 }
    }
}

impl KernelConfig {
    pub fn z(&self) -> f64 {
        Normal::standard().inverse_cdf(1.0 - self.alpha / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Per-sample terms `z_i` smoothed over anchors `x_i` with a Gaussian
/// product kernel.
#[derive(Debug, Clone)]
pub struct KernelEstimator {
    anchors: Array2<f64>,
    terms: Vec<f64>,
    bandwidths: Vec<f64>,
    z: f64,
}

fn column_sd(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.axis_iter(Axis(1))
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            // Constant columns still need a positive bandwidth.
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect()
}

impl KernelEstimator {
    /// Smooth arbitrary terms; `DR` with `mu = 0` and `IS` both land here.
    pub fn from_terms(anchors: Array2<f64>, terms: Vec<f64>, config: &KernelConfig) -> Result<Self, BaselineError> {
        if anchors.nrows() != terms.len() || terms.is_empty() {
            return Err(BaselineError::InvalidInput(format!(
                "{} anchors for {} terms",
                anchors.nrows(),
                terms.len()
            )));
        }
        if !(config.scale > 0.0) || !(0.0 < config.alpha && config.alpha < 1.0) {
            return Err(BaselineError::InvalidInput(format!("bad kernel config {config:?}")));
        }
        let bandwidths = column_sd(anchors.view()).into_iter().map(|s| s * config.scale).collect();
        Ok(Self {
            anchors,
            terms,
            bandwidths,
            z: config.z(),
        })
    }

    /// Terms `rho_i (Y_i - mu_i) + mu_i`.
    pub fn doubly_robust(
        anchors: Array2<f64>,
        ratios: &[f64],
        outcomes: &[f64],
        mu: &[f64],
        config: &KernelConfig,
    ) -> Result<Self, BaselineError> {
        if ratios.len() != outcomes.len() || mu.len() != outcomes.len() {
            return Err(BaselineError::InvalidInput("ratio, outcome and mean lengths differ".into()));
        }
        let terms = ratios
            .iter()
            .zip(outcomes)
            .zip(mu)
            .map(|((r, y), m)| r * (y - m) + m)
            .collect();
        Self::from_terms(anchors, terms, config)
    }

    pub fn importance_sampling(
        anchors: Array2<f64>,
        ratios: &[f64],
        outcomes: &[f64],
        config: &KernelConfig,
    ) -> Result<Self, BaselineError> {
        let zero = vec![0.0; outcomes.len()];
        Self::doubly_robust(anchors, ratios, outcomes, &zero, config)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn terms(&self) -> &[f64] {
        &self.terms
    }

    /// Normalized kernel weights at `x` (sum to 1). Log-kernels are shifted
    /// by their maximum so distant queries do not underflow.
    pub fn kernel_weights(&self, x: &[f64]) -> Result<Vec<f64>, BaselineError> {
        if x.len() != self.anchors.ncols() {
            return Err(BaselineError::InvalidInput(format!(
                "query has {} features, expected {}",
                x.len(),
                self.anchors.ncols()
            )));
        }
        let mut logk: Vec<f64> = self
            .anchors
            .outer_iter()
            .map(|a| {
                -0.5 * a
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidths)
                    .map(|((ai, xi), h)| ((ai - xi) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let max = logk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(BaselineError::DegenerateNeighborhood);
        }
        let mut total = 0.0;
        for v in logk.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in logk.iter_mut() {
            *v /= total;
        }
        Ok(logk)
    }

    /// `m = sum_i k_i z_i`, `se^2 = sum_i k_i^2 (z_i - m)^2`, `m +- z se`.
    pub fn interval(&self, x: &[f64]) -> Result<ConfidenceInterval, BaselineError> {
        let k = self.kernel_weights(x)?;
        let estimate: f64 = k.iter().zip(&self.terms).map(|(w, z)| w * z).sum();
        let var: f64 = k
            .iter()
            .zip(&self.terms)
            .map(|(w, z)| w * w * (z - estimate).powi(2))
            .sum();
        let se = var.sqrt();
        Ok(ConfidenceInterval {
            estimate,
            std_error: se,
            lower: estimate - self.z * se,
            upper: estimate + self.z * se,
        })
    }

    pub fn interval_batch(&self, contexts: ArrayView2<'_, f64>) -> Result<Vec<ConfidenceInterval>, BaselineError> {
        let rows: Vec<Vec<f64>> = contexts.outer_iter().map(|r| r.to_vec()).collect();
        rows.par_iter().map(|x| self.interval(x)).collect()
    }
}

/// `pi_e(T_i|X_i) / pi_b(T_i|X_i)` with the behavior floored.
pub fn importance_ratios(data: &BanditDataset, target: &dyn Policy, behavior: &dyn Policy) -> Vec<f64> {
    let mut row = Vec::with_capacity(data.dim());
    (0..data.len())
        .map(|i| {
            row.clear();
            row.extend(data.context(i).iter().copied());
            let t = data.actions()[i];
            target.probability(&row, t) / behavior.probability(&row, t).max(POSITIVITY_FLOOR)
        })
        .collect()
}

/// Products of stage ratios along each logged trajectory.
pub fn trajectory_ratios(data: &TrajectoryDataset, targets: &[SharedPolicy], behaviors: &[SharedPolicy]) -> Vec<f64> {
    let mut h = Vec::new();
    (0..data.len())
        .map(|i| {
            (0..data.horizon())
                .map(|k| {
                    data.history_into(i, k, &mut h);
                    let t = data.actions(k)[i];
                    targets[k].probability(&h, t) / behaviors[k].probability(&h, t).max(POSITIVITY_FLOOR)
                })
                .product()
        })
        .collect()
}

/// Forest estimate of `E[Y | X]` at every row, fitted on all rows.
pub fn mean_regression(
    anchors: ArrayView2<'_, f64>,
    outcomes: &[f64],
    forest: ForestConfig,
    seed: u64,
) -> Result<Vec<f64>, BaselineError> {
    let mut f = QuantileForest::new(forest);
    f.fit(anchors, outcomes, derive_seed(seed, 0, purpose::FOREST))?;
    Ok(f.predict_mean_batch(anchors)?)
}

/// IS kernel CI at a single context.
pub fn is_kernel_ci(
    data: &BanditDataset,
    target: &dyn Policy,
    behavior: &dyn Policy,
    config: &KernelConfig,
    x: &[f64],
) -> Result<ConfidenceInterval, BaselineError> {
    let ratios = importance_ratios(data, target, behavior);
    KernelEstimator::importance_sampling(data.contexts().to_owned(), &ratios, data.outcomes(), config)?.interval(x)
}

/// DR kernel CI at a single context given `mu(X_i)` for every row.
pub fn dr_kernel_ci(
    data: &BanditDataset,
    target: &dyn Policy,
    behavior: &dyn Policy,
    mu: &[f64],
    config: &KernelConfig,
    x: &[f64],
) -> Result<ConfidenceInterval, BaselineError> {
    let ratios = importance_ratios(data, target, behavior);
    KernelEstimator::doubly_robust(data.contexts().to_owned(), &ratios, data.outcomes(), mu, config)?.interval(x)
}

/// Empirical coverage of `outcomes` by the CIs at `contexts`.
pub fn coverage(
    estimator: &KernelEstimator,
    contexts: ArrayView2<'_, f64>,
    outcomes: &[f64],
) -> Result<f64, BaselineError> {
    let cis = estimator.interval_batch(contexts)?;
    let hits = cis.iter().zip(outcomes).filter(|(c, y)| c.contains(**y)).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Pick the grid scale with the highest coverage on a tuning sample (first
/// one on ties). `build` maps a scale to an estimator fitted on tuning data.
pub fn select_bandwidth<F>(
    grid: &[f64],
    build: F,
    contexts: ArrayView2<'_, f64>,
    outcomes: &[f64],
) -> Result<(f64, f64), BaselineError>
where
    F: Fn(f64) -> Result<KernelEstimator, BaselineError>,
{
    let mut best: Option<(f64, f64)> = None;
    for &scale in grid {
        let c = coverage(&build(scale)?, contexts, outcomes)?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((scale, c));
        }
    }
    best.ok_or_else(|| BaselineError::InvalidInput("empty bandwidth grid".into()))
}
