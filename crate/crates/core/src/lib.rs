//! Conformal off-policy prediction.
//!
//! Prediction sets for the outcome of a target policy built from data logged
//! under a different behavior policy, with finite-sample coverage guarantees
//! when the behavior policy is known and approximate coverage when it is
//! estimated.

pub mod baselines;
pub mod conformal;
pub mod data;
pub mod extensions;
pub mod forest;
pub mod interval;
pub mod policy;
pub mod propensity;
pub mod rng;
pub mod sequential;
pub mod split;
pub mod synthetic;

pub use data::{BanditDataset, DataError, TrajectoryDataset};
pub use forest::{fit_forest, ForestConfig, ForestError, QuantileForest};
pub use interval::PredictionSet;
pub use policy::{AnalyticPolicy, DeterministicPolicy, Policy, PolicyKind, SharedPolicy, UniformPolicy};
pub use propensity::{LogisticModel, Penalty, PropensityError, PseudoPolicy};
pub use split::SplitSpec;
pub use conformal::{
    copp_fit, copp_predict, direct_method, subsampling_method, BehaviorSource, CalibrationMode, ConformalError,
    CoppModel, CoppSettings,
};
pub use extensions::{copp_is_fit, copp_ms_predict, copp_ms_predict_batch, MultiSplitConfig};
pub use sequential::{sequential_copp_fit, sequential_copp_is_fit, SequentialSettings, StageBehavior};
