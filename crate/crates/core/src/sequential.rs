//! Multi-stage COPP: stage-wise behavior fits on flattened histories,
//! stage-wise pseudo policies, full-trajectory matching and a classifier for
//! the match probability given the initial state.

use std::sync::Arc;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::conformal::{
    BehaviorSource, CalibrationMode, CalibrationPoint, ConformalError, CoppModel, CoppSettings, Diagnostics,
    FittedPipeline, Sampler, TestWeight, UnitWeight,
};
use crate::conformal::score;
use crate::data::TrajectoryDataset;
use crate::extensions::{multi_split_with, MultiSplitConfig, MultiSplitResult};
use crate::forest::QuantileForest;
use crate::interval::PredictionSet;
use crate::policy::{SharedPolicy, POSITIVITY_FLOOR};
use crate::propensity::{fit_with_penalty, sample_actions, select_ridge, LogisticModel, Penalty, PseudoPolicy};
use crate::rng::{derive_seed, purpose, stream};
use crate::split::{split_indices, SplitSpec};

/// Behavior models for every stage, each acting on the flattened history.
#[derive(Clone)]
pub struct StagePolicySet {
    stages: Vec<SharedPolicy>,
    /// Fitted models when the stages were estimated.
    fitted: Vec<LogisticModel>,
}

impl StagePolicySet {
    pub fn known(stages: Vec<SharedPolicy>) -> Self {
        Self {
            stages,
            fitted: Vec::new(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, k: usize) -> &SharedPolicy {
        &self.stages[k]
    }

    pub fn stages(&self) -> &[SharedPolicy] {
        &self.stages
    }

    /// Fitted logistic models (empty when the stages were supplied).
    pub fn fitted(&self) -> &[LogisticModel] {
        &self.fitted
    }
}

/// Where the per-stage behavior policies come from.
#[derive(Clone)]
pub enum StageBehavior {
    Known(Vec<SharedPolicy>),
    Logistic(Penalty),
}

impl std::fmt::Debug for StageBehavior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageBehavior::Known(p) => write!(f, "Known({} stages)", p.len()),
            StageBehavior::Logistic(p) => write!(f, "Logistic({p:?})"),
        }
    }
}

/// Fit one logistic model per stage on the flattened histories of `train`.
/// Stage `k` uses seed `derive_seed(seed, k, PROPENSITY)` for any
/// cross-validation.
pub fn fit_stage_policies(
    data: &TrajectoryDataset,
    train: &[usize],
    penalty: Penalty,
    seed: u64,
) -> Result<StagePolicySet, ConformalError> {
    let mut stages = Vec::with_capacity(data.horizon());
    let mut fitted = Vec::with_capacity(data.horizon());
    for k in 0..data.horizon() {
        let h = data.history_matrix(k, train);
        let labels: Vec<usize> = train.iter().map(|&i| data.actions(k)[i]).collect();
        let model = fit_with_penalty(
            h.view(),
            &labels,
            data.num_actions(),
            penalty,
            derive_seed(seed, k as u64, purpose::PROPENSITY),
        )
        .map_err(|e| ConformalError::InvalidInput(format!("stage {}: {e}", k + 1)))?;
        stages.push(model.clone().shared());
        fitted.push(model);
    }
    Ok(StagePolicySet { stages, fitted })
}

/// Per-stage pseudo policies `pi_a,k` proportional to `pi_e,k / pi_b,k`.
pub fn stage_pseudo_policies(
    behavior: &StagePolicySet,
    targets: &[SharedPolicy],
) -> Result<Vec<Arc<PseudoPolicy>>, ConformalError> {
    if targets.len() != behavior.horizon() {
        return Err(ConformalError::InvalidInput(format!(
            "{} target stages for horizon {}",
            targets.len(),
            behavior.horizon()
        )));
    }
    targets
        .iter()
        .zip(behavior.stages())
        .map(|(e, b)| Ok(Arc::new(PseudoPolicy::new(Arc::clone(e), Arc::clone(b))?)))
        .collect()
}

/// Draw `A_k` at every observed history, stage by stage, one uniform per row
/// and stage from a single stream. Returns `actions[k][i]`.
pub fn sample_trajectory_pseudo_actions(
    pseudo: &[SharedPolicy],
    data: &TrajectoryDataset,
    seed: u64,
) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rng = stream(seed, 0, purpose::PSEUDO);
    pseudo
        .iter()
        .enumerate()
        .map(|(k, p)| sample_actions(p.as_ref(), data.history_matrix(k, &all).view(), &mut rng))
        .collect()
}

/// Logistic classifier of the full-trajectory match indicator on `X_1`;
/// `w(x_1) = 1 / clip(e(x_1), eps, 1)`.
#[derive(Debug, Clone)]
pub struct MatchWeightModel {
    model: LogisticModel,
    floor: f64,
}

impl MatchWeightModel {
    pub fn fit(
        initial_states: ArrayView2<'_, f64>,
        matched: &[bool],
        penalty: Penalty,
        seed: u64,
    ) -> Result<Self, ConformalError> {
        let labels: Vec<usize> = matched.iter().map(|&m| usize::from(m)).collect();
        let model = fit_with_penalty(initial_states, &labels, 2, penalty, seed)?;
        Ok(Self {
            model,
            floor: POSITIVITY_FLOOR,
        })
    }

    pub fn model(&self) -> &LogisticModel {
        &self.model
    }

    /// Estimated `P(A = T | X_1 = x_1)`, clipped into `[eps, 1]`.
    pub fn match_probability(&self, x1: &[f64]) -> f64 {
        let mut p = [0.0; 2];
        self.model.raw_probabilities_into(x1, &mut p);
        p[1].clamp(self.floor, 1.0)
    }

    pub fn weight(&self, x1: &[f64]) -> f64 {
        1.0 / self.match_probability(x1)
    }
}

impl TestWeight for MatchWeightModel {
    fn weight(&self, context: &[f64]) -> f64 {
        MatchWeightModel::weight(self, context)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequentialSettings {
    pub copp: CoppSettings,
    /// Penalty for the match-probability classifier.
    pub match_penalty: Penalty,
}

impl Default for SequentialSettings {
    fn default() -> Self {
        Self {
            copp: CoppSettings::default(),
            match_penalty: Penalty::None,
        }
    }
}

impl SequentialSettings {
    pub fn new(copp: CoppSettings) -> Self {
        Self {
            copp,
            ..Self::default()
        }
    }
}

fn resolve_stages(
    behavior: &StageBehavior,
    data: &TrajectoryDataset,
    train: &[usize],
    seed: u64,
    diagnostics: &mut Diagnostics,
) -> Result<StagePolicySet, ConformalError> {
    match behavior {
        StageBehavior::Known(p) => {
            if p.len() != data.horizon() {
                return Err(ConformalError::InvalidInput(format!(
                    "{} behavior stages for horizon {}",
                    p.len(),
                    data.horizon()
                )));
            }
            Ok(StagePolicySet::known(p.clone()))
        }
        StageBehavior::Logistic(penalty) => {
            let set = fit_stage_policies(data, train, *penalty, seed)?;
            for m in set.fitted() {
                diagnostics.ridge_lambda.push(m.ridge_lambda);
                diagnostics.propensity_converged.push(m.converged);
            }
            Ok(set)
        }
    }
}

/// Split, fit stage policies, draw pseudo trajectories, fit the match
/// weight, fit the forest on `(X_1, Y)` of fully matched training rows and
/// score every calibration row.
///
/// With horizon 1 the match weight is the closed form
/// `sum_t pi_e(t|x) / pi_b(t|x)` and the result is identical to the
/// single-stage pipeline under the same seed.
pub fn fit_sequential_pipeline(
    data: &TrajectoryDataset,
    targets: &[SharedPolicy],
    behavior: &StageBehavior,
    settings: &SequentialSettings,
    seed: u64,
) -> Result<Arc<FittedPipeline>, ConformalError> {
    fit_with_sampler(data, targets, behavior, settings, Sampler::Pseudo, seed)
}

fn fit_with_sampler(
    data: &TrajectoryDataset,
    targets: &[SharedPolicy],
    behavior: &StageBehavior,
    settings: &SequentialSettings,
    sampler: Sampler,
    seed: u64,
) -> Result<Arc<FittedPipeline>, ConformalError> {
    let copp = &settings.copp;
    if !(0.0 < copp.alpha && copp.alpha < 1.0) {
        return Err(ConformalError::InvalidInput(format!("alpha {} outside (0, 1)", copp.alpha)));
    }
    if targets.iter().any(|p| p.num_actions() != data.num_actions()) {
        return Err(ConformalError::InvalidInput("target action count differs from data".into()));
    }
    let n = data.len();
    let horizon = data.horizon();
    let (train, cal) = split_indices(n, &SplitSpec::new(copp.train_fraction, derive_seed(seed, 0, purpose::SPLIT)))?;
    let mut diagnostics = Diagnostics {
        n_train: train.len(),
        n_cal: cal.len(),
        ..Default::default()
    };
    let stages = resolve_stages(
        behavior,
        data,
        &train,
        derive_seed(seed, 0, purpose::PROPENSITY),
        &mut diagnostics,
    )?;
    let pseudo = stage_pseudo_policies(&stages, targets)?;
    let draw_from: Vec<SharedPolicy> = match sampler {
        Sampler::Pseudo => pseudo.iter().map(|p| Arc::clone(p) as SharedPolicy).collect(),
        Sampler::Target => targets.to_vec(),
    };
    let drawn = sample_trajectory_pseudo_actions(&draw_from, data, seed);

    // Cumulative match through each stage.
    let mut matched = vec![true; n];
    for k in 0..horizon {
        for (i, m) in matched.iter_mut().enumerate() {
            *m &= drawn[k][i] == data.actions(k)[i];
        }
        diagnostics
            .match_rates
            .push(matched.iter().filter(|&&m| m).count() as f64 / n as f64);
    }

    let x1 = data.initial_states();
    let test_weight: Arc<dyn TestWeight> = if sampler == Sampler::Target {
        Arc::new(UnitWeight)
    } else if horizon == 1 {
        Arc::clone(&pseudo[0]) as Arc<dyn TestWeight>
    } else {
        let train_x1 = x1.select(Axis(0), &train);
        let labels: Vec<bool> = train.iter().map(|&i| matched[i]).collect();
        if !labels.iter().any(|&m| m) {
            return Err(ConformalError::EmptyCalibration {
                calibration: cal.len(),
                match_rates: diagnostics.match_rates.clone(),
            });
        }
        Arc::new(MatchWeightModel::fit(
            train_x1.view(),
            &labels,
            settings.match_penalty,
            derive_seed(seed, 0, purpose::MATCH_WEIGHT),
        )?)
    };

    let train_matched: Vec<usize> = train.iter().copied().filter(|&i| matched[i]).collect();
    diagnostics.n_train_matched = train_matched.len();
    diagnostics.n_cal_matched = cal.iter().filter(|&&i| matched[i]).count();
    let forest_x = x1.select(Axis(0), &train_matched);
    let forest_y: Vec<f64> = train_matched.iter().map(|&i| data.outcomes()[i]).collect();
    let mut forest = QuantileForest::new(copp.forest);
    forest.fit(forest_x.view(), &forest_y, derive_seed(seed, 0, purpose::FOREST))?;

    let levels = copp.levels();
    let cal_x = x1.select(Axis(0), &cal);
    let qs = forest.predict_quantiles_batch(cal_x.view(), levels)?;
    let mut row = Vec::with_capacity(data.stage_dim(0));
    let mut hist = Vec::new();
    let points = cal
        .iter()
        .zip(qs)
        .map(|(&i, (lo, hi))| {
            row.clear();
            row.extend(x1.row(i).iter().copied());
            let is_factor = (0..horizon)
                .map(|k| {
                    data.history_into(i, k, &mut hist);
                    draw_from[k].probability(&hist, data.actions(k)[i])
                })
                .product();
            CalibrationPoint {
                row: i,
                score: score(data.outcomes()[i], lo, hi),
                base_weight: test_weight.weight(&row),
                is_factor,
                matched: matched[i],
            }
        })
        .collect();
    Ok(Arc::new(FittedPipeline::from_parts(
        forest,
        levels,
        copp.alpha,
        test_weight,
        points,
        diagnostics,
    )))
}

/// Sequential COPP on fully matched calibration trajectories.
pub fn sequential_copp_fit(
    data: &TrajectoryDataset,
    targets: &[SharedPolicy],
    behavior: &StageBehavior,
    settings: &SequentialSettings,
    seed: u64,
) -> Result<CoppModel, ConformalError> {
    fit_sequential_pipeline(data, targets, behavior, settings, seed)?.model(CalibrationMode::Matched)
}

/// Sequential COPP-IS: every calibration trajectory weighted by
/// `prod_k pi_a,k(T_k|H_k) * w(X_1)`.
pub fn sequential_copp_is_fit(
    data: &TrajectoryDataset,
    targets: &[SharedPolicy],
    behavior: &StageBehavior,
    settings: &SequentialSettings,
    seed: u64,
) -> Result<CoppModel, ConformalError> {
    fit_sequential_pipeline(data, targets, behavior, settings, seed)?.model(CalibrationMode::ImportanceSampling)
}

/// Subsampling comparator: stage actions drawn from the target policies and
/// unweighted split conformal on fully matched rows.
pub fn sequential_subsampling_method(
    data: &TrajectoryDataset,
    targets: &[SharedPolicy],
    behavior: &StageBehavior,
    settings: &SequentialSettings,
    seed: u64,
) -> Result<CoppModel, ConformalError> {
    fit_with_sampler(data, targets, behavior, settings, Sampler::Target, seed)?.model(CalibrationMode::Unweighted)
}

pub fn sequential_copp_predict(model: &CoppModel, x1: &[f64]) -> Result<PredictionSet, ConformalError> {
    model.predict(x1)
}

/// Multi-split aggregation over sequential pipelines for every row of
/// `initial_states`.
pub fn sequential_ms_predict_batch(
    data: &TrajectoryDataset,
    targets: &[SharedPolicy],
    behavior: &StageBehavior,
    settings: &SequentialSettings,
    config: &MultiSplitConfig,
    modes: &[CalibrationMode],
    initial_states: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<Vec<MultiSplitResult>, ConformalError> {
    let behavior = pin_stage_penalties(behavior, data, settings.copp.train_fraction, seed)?;
    let split = SequentialSettings {
        copp: CoppSettings {
            alpha: config.split_alpha(settings.copp.alpha),
            ..settings.copp.clone()
        },
        ..settings.clone()
    };
    multi_split_with(
        |s| fit_sequential_pipeline(data, targets, &behavior, &split, s),
        config,
        modes,
        settings.copp.alpha,
        initial_states,
        seed,
    )
}

/// Cross-validated stage penalties are chosen once, on repetition 0's
/// training rows. Every stage then uses the largest selected strength.
fn pin_stage_penalties(
    behavior: &StageBehavior,
    data: &TrajectoryDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<StageBehavior, ConformalError> {
    match behavior {
        StageBehavior::Logistic(Penalty::RidgeCv) => {
            let seed0 = derive_seed(seed, 0, purpose::MULTI_SPLIT);
            let (train, _) = split_indices(
                data.len(),
                &SplitSpec::new(train_fraction, derive_seed(seed0, 0, purpose::SPLIT)),
            )?;
            let prop_seed = derive_seed(seed0, 0, purpose::PROPENSITY);
            let mut lambda: f64 = 0.0;
            for k in 0..data.horizon() {
                let h = data.history_matrix(k, &train);
                let t: Vec<usize> = train.iter().map(|&i| data.actions(k)[i]).collect();
                let report = select_ridge(
                    h.view(),
                    &t,
                    data.num_actions(),
                    derive_seed(prop_seed, k as u64, purpose::PROPENSITY),
                )?;
                lambda = lambda.max(report.chosen);
            }
            Ok(StageBehavior::Logistic(Penalty::Ridge(lambda)))
        }
        other => Ok(other.clone()),
    }
}

/// Immediate rewards: stage `k`'s reward is predicted from `X_1` by running
/// the sequential pipeline on the first `k + 1` stages with that reward as
/// the response. One model per stage.
pub fn per_stage_copp(
    data: &TrajectoryDataset,
    targets: &[SharedPolicy],
    behavior: &StageBehavior,
    settings: &SequentialSettings,
    seed: u64,
) -> Result<Vec<CoppModel>, ConformalError> {
    let rewards = data
        .stage_rewards()
        .ok_or_else(|| ConformalError::InvalidInput("dataset has no stage rewards".into()))?;
    (0..data.horizon())
        .map(|k| {
            let truncated = data.truncated(k + 1, rewards[k].clone())?;
            let stage_behavior = match behavior {
                StageBehavior::Known(p) => StageBehavior::Known(p[..=k].to_vec()),
                other => other.clone(),
            };
            sequential_copp_fit(
                &truncated,
                &targets[..=k],
                &stage_behavior,
                settings,
                derive_seed(seed, k as u64, purpose::SPLIT),
            )
        })
        .collect()
}

/// Convert a single-stage behavior source to its horizon-1 counterpart.
impl From<&BehaviorSource> for StageBehavior {
    fn from(source: &BehaviorSource) -> Self {
        match source {
            BehaviorSource::Known(p) => StageBehavior::Known(vec![Arc::clone(p)]),
            BehaviorSource::Logistic(penalty) => StageBehavior::Logistic(*penalty),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::copp_fit;
    use crate::data::BanditDataset;
    use crate::extensions::copp_is_fit;
    use crate::forest::ForestConfig;
    use crate::policy::{DeterministicPolicy, Policy, UniformPolicy};
    use crate::propensity::fit_logistic;
    use crate::synthetic::{Example1, Example2, Example3, SequentialDesign, TargetKind};

    fn settings() -> SequentialSettings {
        SequentialSettings::new(CoppSettings::default().with_forest(ForestConfig::default().with_trees(30)))
    }

    fn example1_data(n: usize, seed: u64) -> BanditDataset {
        Example1::new(false).generate(n, &mut stream(seed, 0, "d"))
    }

    #[test]
    fn horizon_one_stage_fit_equals_single_stage() {
        let data = example1_data(600, 1);
        let traj = TrajectoryDataset::from_bandit(&data);
        let train: Vec<usize> = (0..450).collect();
        let set = fit_stage_policies(&traj, &train, Penalty::None, 5).unwrap();
        let x = data.contexts().select(Axis(0), &train);
        let t: Vec<usize> = train.iter().map(|&i| data.actions()[i]).collect();
        let single = fit_logistic(x.view(), &t, 2, 0.0).unwrap();
        assert_eq!(set.fitted()[0].coefficients, single.coefficients);
    }

    #[test]
    fn horizon_one_pipeline_equals_single_stage() {
        let data = example1_data(900, 2);
        let traj = TrajectoryDataset::from_bandit(&data);
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let probe = Example1::new(false).test_sample(50, TargetKind::Stochastic, &mut stream(2, 1, "t"));
        for source in [
            BehaviorSource::logistic(),
            BehaviorSource::known(Example1::behavior_policy()),
        ] {
            let s = settings();
            let single = copp_fit(&data, &tgt, &source, &s.copp, 9).unwrap();
            let seq = sequential_copp_fit(&traj, &[Arc::clone(&tgt)], &StageBehavior::from(&source), &s, 9).unwrap();
            assert_eq!(single.scores().scores(), seq.scores().scores());
            assert_eq!(
                single.predict_batch(probe.contexts.view()).unwrap(),
                seq.predict_batch(probe.contexts.view()).unwrap()
            );
            let single_is = copp_is_fit(&data, &tgt, &source, &s.copp, 9).unwrap();
            let seq_is = sequential_copp_is_fit(&traj, &[Arc::clone(&tgt)], &StageBehavior::from(&source), &s, 9).unwrap();
            assert_eq!(
                single_is.predict_batch(probe.contexts.view()).unwrap(),
                seq_is.predict_batch(probe.contexts.view()).unwrap()
            );
        }
    }

    #[test]
    fn example3_stage_coefficients_recovered() {
        let design = Example3::new(3);
        let data = design.generate(10_000, &mut stream(3, 0, "d"));
        let train: Vec<usize> = (0..data.len()).collect();
        let set = fit_stage_policies(&data, &train, Penalty::None, 1).unwrap();
        for (k, model) in set.fitted().iter().enumerate() {
            let beta = &model.coefficients[0];
            // Layout: intercept, then (x_1, t_1, ..., x_k).
            assert_eq!(beta.len(), 1 + 2 * k + 1);
            assert!((beta[0] + 0.5).abs() < 0.15, "stage {k} intercept {}", beta[0]);
            for (j, &b) in beta.iter().enumerate().skip(1) {
                let truth = if j == beta.len() - 1 { 1.0 } else { 0.0 };
                assert!((b - truth).abs() < 0.15, "stage {k} coefficient {j} = {b}");
            }
        }
    }

    #[test]
    fn example2_stage_two_features() {
        let data = Example2::new(false).generate(50, &mut stream(4, 0, "d"));
        let train: Vec<usize> = (0..50).collect();
        let set = fit_stage_policies(&data, &train, Penalty::Ridge(0.1), 1).unwrap();
        assert_eq!(set.fitted()[1].dim(), 3);
    }

    #[test]
    fn deterministic_targets_fix_pseudo_actions() {
        let design = Example3::new(3);
        let data = design.generate(300, &mut stream(5, 0, "d"));
        let beh = StagePolicySet::known(design.behavior_policies());
        let targets = design.target_policies(TargetKind::Deterministic);
        let pseudo = stage_pseudo_policies(&beh, &targets).unwrap();
        let draw: Vec<SharedPolicy> = pseudo.iter().map(|p| Arc::clone(p) as SharedPolicy).collect();
        let drawn = sample_trajectory_pseudo_actions(&draw, &data, 1);
        let mut h = Vec::new();
        for k in 0..3 {
            for i in 0..data.len() {
                data.history_into(i, k, &mut h);
                let want = if targets[k].probability(&h, 1) > 0.5 { 1 } else { 0 };
                assert_eq!(drawn[k][i], want);
            }
        }
    }

    #[test]
    fn uniform_behavior_gives_target_as_pseudo_policy() {
        let design = Example3::new(2);
        let uniform: SharedPolicy = Arc::new(UniformPolicy { num_actions: 2 });
        let beh = StagePolicySet::known(vec![Arc::clone(&uniform), uniform]);
        let targets = design.target_policies(TargetKind::Stochastic);
        let pseudo = stage_pseudo_policies(&beh, &targets).unwrap();
        for h in [[0.3, 1.0, -0.2], [1.5, 0.0, 0.7]] {
            let a = pseudo[1].probabilities(&h);
            let e = targets[1].probabilities(&h);
            assert!((a[0] - e[0]).abs() < 1e-12 && (a[1] - e[1]).abs() < 1e-12);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn example2_match_rate_matches_product_oracle() {
        let design = Example2::new(false);
        let n = 50_000;
        let data = design.generate(n, &mut stream(6, 0, "d"));
        let beh = StagePolicySet::known(design.behavior_policies());
        let targets = design.target_policies(TargetKind::Stochastic);
        let pseudo = stage_pseudo_policies(&beh, &targets).unwrap();
        let draw: Vec<SharedPolicy> = pseudo.iter().map(|p| Arc::clone(p) as SharedPolicy).collect();
        let drawn = sample_trajectory_pseudo_actions(&draw, &data, 2);
        let mut h = Vec::new();
        let mut expected = 0.0;
        let mut var = 0.0;
        let mut hits = 0usize;
        for i in 0..n {
            let p: f64 = (0..2)
                .map(|k| {
                    data.history_into(i, k, &mut h);
                    pseudo[k].probability(&h, data.actions(k)[i])
                })
                .product();
            expected += p;
            var += p * (1.0 - p);
            hits += usize::from((0..2).all(|k| drawn[k][i] == data.actions(k)[i]));
        }
        let sigma = var.sqrt();
        assert!(
            (hits as f64 - expected).abs() < 3.0 * sigma,
            "hits {hits}, expected {expected}, sigma {sigma}"
        );
    }

    #[test]
    fn match_weight_is_bounded() {
        let design = Example3::new(3);
        let data = design.generate(2000, &mut stream(7, 0, "d"));
        let pipe = fit_sequential_pipeline(
            &data,
            &design.target_policies(TargetKind::Stochastic),
            &StageBehavior::Logistic(Penalty::None),
            &settings(),
            3,
        )
        .unwrap();
        for c in pipe.calibration() {
            assert!(c.base_weight >= 1.0 && c.base_weight <= 1.0 / POSITIVITY_FLOOR + 1e-6);
            assert!(c.is_factor > 0.0 && c.is_factor <= 1.0);
        }
        let d = pipe.diagnostics();
        assert_eq!(d.match_rates.len(), 3);
        assert!(d.match_rates.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(d.ridge_lambda.len(), 3);
    }

    #[test]
    fn deterministic_pseudo_policies_make_is_equal_matched() {
        let design = Example3::new(2);
        let data = design.generate(1500, &mut stream(8, 0, "d"));
        let targets: Vec<SharedPolicy> = (0..2)
            .map(|_| DeterministicPolicy::new(2, |h: &[f64]| usize::from(h[h.len() - 1] > 0.0)).shared())
            .collect();
        let pipe = fit_sequential_pipeline(
            &data,
            &targets,
            &StageBehavior::Known(design.behavior_policies()),
            &settings(),
            4,
        )
        .unwrap();
        let a = pipe.model(CalibrationMode::Matched).unwrap();
        let b = pipe.model(CalibrationMode::ImportanceSampling).unwrap();
        let probe = data.initial_states();
        for row in probe.outer_iter().take(100) {
            let x = row.to_vec();
            assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
        }
    }

    #[test]
    fn horizon_one_subsampling_equals_single_stage() {
        let data = example1_data(900, 10);
        let traj = TrajectoryDataset::from_bandit(&data);
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let source = BehaviorSource::logistic();
        let s = settings();
        let single = crate::conformal::subsampling_method(&data, &tgt, &source, &s.copp, 4).unwrap();
        let seq = sequential_subsampling_method(&traj, &[Arc::clone(&tgt)], &StageBehavior::from(&source), &s, 4).unwrap();
        let probe = data.contexts();
        assert_eq!(single.predict_batch(probe).unwrap(), seq.predict_batch(probe).unwrap());
    }

    #[test]
    fn per_stage_models_need_rewards() {
        let design = Example3::new(2);
        let data = design.generate(200, &mut stream(9, 0, "d"));
        let targets = design.target_policies(TargetKind::Stochastic);
        let beh = StageBehavior::Known(design.behavior_policies());
        assert!(per_stage_copp(&data, &targets, &beh, &settings(), 1).is_err());
        let rewards: Vec<Vec<f64>> = (0..2).map(|k| data.states(k).column(0).to_vec()).collect();
        let data = data.with_stage_rewards(rewards).unwrap();
        let models = per_stage_copp(&data, &targets, &beh, &settings(), 1).unwrap();
        assert_eq!(models.len(), 2);
    }
}
