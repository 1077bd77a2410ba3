//! Weighted split-conformal prediction for target-policy outcomes.

mod direct;
mod pipeline;
mod quantile;

pub use direct::{
    direct_method, DensityModel, DensitySource, DirectModel, DirectSettings, FnDensity, GaussianForestDensity,
    GridSpec, DENSITY_FLOOR,
};
pub use pipeline::{
    copp_fit, copp_predict, fit_pipeline, subsampling_method, CalibrationMode, CalibrationPoint, CoppModel,
    CoppSettings, Diagnostics, FittedPipeline, Sampler, TestWeight, UnitWeight,
};
pub(crate) use quantile::score;
pub use quantile::{cqr_score, CalibratedScores, WeightedScoreSet, MASS_TOLERANCE};

use std::sync::Arc;

use thiserror::Error;

use crate::data::DataError;
use crate::forest::ForestError;
use crate::policy::SharedPolicy;
use crate::propensity::{Penalty, PropensityError};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no matched calibration samples ({calibration} calibration rows; match rates {match_rates:?})")]
    EmptyCalibration {
        calibration: usize,
        /// Per-stage fraction of calibration rows whose pseudo action matched.
        match_rates: Vec<f64>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

impl ConformalError {
    pub fn is_empty_calibration(&self) -> bool {
        matches!(self, ConformalError::EmptyCalibration { .. })
    }
}

/// Where the behavior policy comes from.
#[derive(Clone)]
pub enum BehaviorSource {
    /// Supplied exactly (randomized studies).
    Known(SharedPolicy),
    /// Multinomial logistic regression on the training split.
    Logistic(Penalty),
}

impl BehaviorSource {
    pub fn known(policy: SharedPolicy) -> Self {
        BehaviorSource::Known(policy)
    }

    pub fn logistic() -> Self {
        BehaviorSource::Logistic(Penalty::None)
    }
}

impl std::fmt::Debug for BehaviorSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BehaviorSource::Known(p) => write!(f, "Known({:?})", p.kind()),
            BehaviorSource::Logistic(p) => write!(f, "Logistic({p:?})"),
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if 0.0 < alpha && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidInput(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// `(alpha / 2, 1 - alpha / 2)`.
pub fn default_levels(alpha: f64) -> (f64, f64) {
    (alpha / 2.0, 1.0 - alpha / 2.0)
}

pub(crate) type SharedWeight = Arc<dyn TestWeight>;
