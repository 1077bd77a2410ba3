//! The split / propensity / pseudo-sampling / forest / calibration pipeline
//! shared by COPP, COPP-IS and the subsampling comparator.

use std::sync::Arc;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::quantile::{score, CalibratedScores};
use super::{check_alpha, default_levels, BehaviorSource, ConformalError, SharedWeight};
use crate::data::BanditDataset;
use crate::forest::{ForestConfig, QuantileForest};
use crate::interval::PredictionSet;
use crate::policy::{Policy, SharedPolicy};
use crate::propensity::{fit_with_penalty, sample_actions, PseudoPolicy};
use crate::rng::{derive_seed, purpose, stream};
use crate::split::{split_indices, SplitSpec, DEFAULT_TRAIN_FRACTION};

/// Weight attached to a test context: the mass placed on `+inf`.
pub trait TestWeight: Send + Sync {
    fn weight(&self, context: &[f64]) -> f64;
}

impl TestWeight for PseudoPolicy {
    fn weight(&self, context: &[f64]) -> f64 {
        PseudoPolicy::weight(self, context)
    }
}

/// Exchangeable case: every point weighs 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitWeight;

impl TestWeight for UnitWeight {
    fn weight(&self, _context: &[f64]) -> f64 {
        1.0
    }
}

/// Policy used to draw the pseudo actions that select subsamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// `pi_a` proportional to `pi_e / pi_b`.
    Pseudo,
    /// The target policy itself (the subsampling comparator).
    Target,
}

/// How calibration points are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Matched calibration points with weight `w(X_i)`.
    Matched,
    /// Every calibration point with weight `pi_a(T_i|X_i) w(X_i)`.
    ImportanceSampling,
    /// Every calibration point with weight `1[A_i = T_i] w(X_i)`; the
    /// importance-sampling form with indicators in place of probabilities.
    IndicatorWeights,
    /// Matched calibration points, all weights 1 (test weight 1 as well).
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoppSettings {
    pub alpha: f64,
    pub train_fraction: f64,
    pub forest: ForestConfig,
    /// Quantile levels for the forest; `(alpha/2, 1 - alpha/2)` if unset.
    pub levels: Option<(f64, f64)>,
}

impl Default for CoppSettings {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            forest: ForestConfig::default(),
            levels: None,
        }
    }
}

impl CoppSettings {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_forest(mut self, forest: ForestConfig) -> Self {
        self.forest = forest;
        self
    }

    pub fn levels(&self) -> (f64, f64) {
        self.levels.unwrap_or_else(|| default_levels(self.alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub row: usize,
    pub score: f64,
    /// `w(X_i)`: inverse match probability.
    pub base_weight: f64,
    /// Probability that the pseudo policy reproduces the logged action(s).
    pub is_factor: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_train: usize,
    pub n_cal: usize,
    pub n_train_matched: usize,
    pub n_cal_matched: usize,
    /// Per-stage match rate of pseudo actions over all rows.
    pub match_rates: Vec<f64>,
    pub ridge_lambda: Vec<f64>,
    pub propensity_converged: Vec<bool>,
}

/// Everything up to (not including) the choice of calibration weights.
pub struct FittedPipeline {
    forest: QuantileForest,
    levels: (f64, f64),
    alpha: f64,
    test_weight: SharedWeight,
    cal: Vec<CalibrationPoint>,
    diagnostics: Diagnostics,
    behavior: Option<SharedPolicy>,
}

impl FittedPipeline {
    pub(crate) fn from_parts(
        forest: QuantileForest,
        levels: (f64, f64),
        alpha: f64,
        test_weight: SharedWeight,
        cal: Vec<CalibrationPoint>,
        diagnostics: Diagnostics,
    ) -> Self {
        Self {
            forest,
            levels,
            alpha,
            test_weight,
            cal,
            diagnostics,
            behavior: None,
        }
    }

    pub fn forest(&self) -> &QuantileForest {
        &self.forest
    }

    pub fn levels(&self) -> (f64, f64) {
        self.levels
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn calibration(&self) -> &[CalibrationPoint] {
        &self.cal
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Behavior policy used for weighting (fitted or known); absent for
    /// multi-stage pipelines.
    pub fn behavior(&self) -> Option<&SharedPolicy> {
        self.behavior.as_ref()
    }

    pub fn test_weight(&self, context: &[f64]) -> f64 {
        self.test_weight.weight(context)
    }

    /// Conformal model at the pipeline's significance level.
    pub fn model(self: &Arc<Self>, mode: CalibrationMode) -> Result<CoppModel, ConformalError> {
        self.model_with_alpha(mode, self.alpha)
    }

    /// Conformal model at another significance level; the forest's quantile
    /// levels stay as fitted.
    pub fn model_with_alpha(self: &Arc<Self>, mode: CalibrationMode, alpha: f64) -> Result<CoppModel, ConformalError> {
        check_alpha(alpha)?;
        let (scores, weights): (Vec<f64>, Vec<f64>) = self
            .cal
            .iter()
            .filter_map(|c| match mode {
                CalibrationMode::Matched => c.matched.then_some((c.score, c.base_weight)),
                CalibrationMode::Unweighted => c.matched.then_some((c.score, 1.0)),
                CalibrationMode::ImportanceSampling => Some((c.score, c.is_factor * c.base_weight)),
                CalibrationMode::IndicatorWeights => {
                    Some((c.score, if c.matched { c.base_weight } else { 0.0 }))
                }
            })
            .unzip();
        if matches!(mode, CalibrationMode::Matched | CalibrationMode::Unweighted) && scores.is_empty() {
            return Err(ConformalError::EmptyCalibration {
                calibration: self.cal.len(),
                match_rates: self.diagnostics.match_rates.clone(),
            });
        }
        Ok(CoppModel {
            pipeline: Arc::clone(self),
            mode,
            alpha,
            scores: CalibratedScores::new(&scores, &weights),
        })
    }
}

/// A calibrated conformal predictor.
#[derive(Clone)]
pub struct CoppModel {
    pipeline: Arc<FittedPipeline>,
    mode: CalibrationMode,
    alpha: f64,
    scores: CalibratedScores,
}

impl CoppModel {
    pub fn mode(&self) -> CalibrationMode {
        self.mode
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn pipeline(&self) -> &Arc<FittedPipeline> {
        &self.pipeline
    }

    pub fn scores(&self) -> &CalibratedScores {
        &self.scores
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.pipeline.diagnostics
    }

    pub fn effective_sample_size(&self) -> f64 {
        self.scores.effective_sample_size()
    }

    pub fn test_weight(&self, context: &[f64]) -> f64 {
        match self.mode {
            CalibrationMode::Unweighted => 1.0,
            _ => self.pipeline.test_weight(context),
        }
    }

    /// `(q_lo(x), q_hi(x), Q_{1-alpha}(x))`.
    pub fn bounds(&self, context: &[f64]) -> Result<(f64, f64, f64), ConformalError> {
        let (lo, hi) = self.pipeline.forest.predict_quantiles(context, self.pipeline.levels)?;
        let q = self.scores.quantile(1.0 - self.alpha, self.test_weight(context));
        Ok((lo, hi, q))
    }

    pub fn predict(&self, context: &[f64]) -> Result<PredictionSet, ConformalError> {
        let (lo, hi, q) = self.bounds(context)?;
        Ok(expand(lo, hi, q))
    }

    pub fn predict_batch(&self, contexts: ArrayView2<'_, f64>) -> Result<Vec<PredictionSet>, ConformalError> {
        let qs = self.pipeline.forest.predict_quantiles_batch(contexts, self.pipeline.levels)?;
        let mut row = Vec::with_capacity(contexts.ncols());
        Ok(qs
            .into_iter()
            .zip(contexts.outer_iter())
            .map(|((lo, hi), x)| {
                row.clear();
                row.extend(x.iter().copied());
                let q = self.scores.quantile(1.0 - self.alpha, self.test_weight(&row));
                expand(lo, hi, q)
            })
            .collect())
    }

    /// Conformal p-value `sum_i p_i 1[S(x, y) <= S_i] + p_inf`.
    pub fn p_value(&self, context: &[f64], y: f64) -> Result<f64, ConformalError> {
        let (lo, hi) = self.pipeline.forest.predict_quantiles(context, self.pipeline.levels)?;
        Ok(self.scores.p_value(score(y, lo, hi), self.test_weight(context)))
    }
}

/// `[q_lo - Q, q_hi + Q]`, or the whole line when `Q = +inf`.
pub(crate) fn expand(lo: f64, hi: f64, q: f64) -> PredictionSet {
    if q == f64::INFINITY {
        PredictionSet::full()
    } else {
        PredictionSet::interval(lo - q, hi + q)
    }
}

/// Resolve the behavior policy on the training rows.
pub(crate) fn resolve_behavior(
    source: &BehaviorSource,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_actions: usize,
    seed: u64,
    diagnostics: &mut Diagnostics,
) -> Result<SharedPolicy, ConformalError> {
    match source {
        BehaviorSource::Known(p) => Ok(Arc::clone(p)),
        BehaviorSource::Logistic(penalty) => {
            let model = fit_with_penalty(features, labels, num_actions, *penalty, seed)?;
            diagnostics.ridge_lambda.push(model.ridge_lambda);
            diagnostics.propensity_converged.push(model.converged);
            Ok(model.shared())
        }
    }
}

/// Split, resolve the behavior policy, draw pseudo actions, fit the forest
/// on matched training rows and score every calibration row.
pub fn fit_pipeline(
    data: &BanditDataset,
    target: &SharedPolicy,
    behavior: &BehaviorSource,
    settings: &CoppSettings,
    sampler: Sampler,
    seed: u64,
) -> Result<Arc<FittedPipeline>, ConformalError> {
    check_alpha(settings.alpha)?;
    if target.num_actions() != data.num_actions() {
        return Err(ConformalError::InvalidInput(format!(
            "target policy has {} actions, data has {}",
            target.num_actions(),
            data.num_actions()
        )));
    }
    let n = data.len();
    let (train, cal) = split_indices(
        n,
        &SplitSpec::new(settings.train_fraction, derive_seed(seed, 0, purpose::SPLIT)),
    )?;
    let mut diagnostics = Diagnostics {
        n_train: train.len(),
        n_cal: cal.len(),
        ..Default::default()
    };
    let x = data.contexts();
    let t = data.actions();
    let train_x = x.select(Axis(0), &train);
    let train_t: Vec<usize> = train.iter().map(|&i| t[i]).collect();
    let behavior_policy = resolve_behavior(
        behavior,
        train_x.view(),
        &train_t,
        data.num_actions(),
        derive_seed(seed, 0, purpose::PROPENSITY),
        &mut diagnostics,
    )?;
    let pseudo = Arc::new(PseudoPolicy::new(Arc::clone(target), Arc::clone(&behavior_policy))?);
    let sampler_policy: &dyn Policy = match sampler {
        Sampler::Pseudo => pseudo.as_ref(),
        Sampler::Target => target.as_ref(),
    };
    let drawn = sample_actions(sampler_policy, x, &mut stream(seed, 0, purpose::PSEUDO));
    let matched: Vec<bool> = drawn.iter().zip(t).map(|(a, b)| a == b).collect();
    diagnostics.match_rates = vec![matched.iter().filter(|&&m| m).count() as f64 / n as f64];

    let train_matched: Vec<usize> = train.iter().copied().filter(|&i| matched[i]).collect();
    diagnostics.n_train_matched = train_matched.len();
    diagnostics.n_cal_matched = cal.iter().filter(|&&i| matched[i]).count();
    let forest_x = x.select(Axis(0), &train_matched);
    let forest_y: Vec<f64> = train_matched.iter().map(|&i| data.outcomes()[i]).collect();
    let mut forest = QuantileForest::new(settings.forest);
    forest.fit(forest_x.view(), &forest_y, derive_seed(seed, 0, purpose::FOREST))?;

    let levels = settings.levels();
    let cal_x = x.select(Axis(0), &cal);
    let qs = forest.predict_quantiles_batch(cal_x.view(), levels)?;
    let mut row = Vec::with_capacity(data.dim());
    let points = cal
        .iter()
        .zip(qs)
        .map(|(&i, (lo, hi))| {
            row.clear();
            row.extend(x.row(i).iter().copied());
            CalibrationPoint {
                row: i,
                score: score(data.outcomes()[i], lo, hi),
                base_weight: pseudo.weight(&row),
                is_factor: pseudo.probability(&row, t[i]),
                matched: matched[i],
            }
        })
        .collect();
    let test_weight: SharedWeight = match sampler {
        Sampler::Pseudo => pseudo,
        Sampler::Target => Arc::new(UnitWeight),
    };
    let mut pipeline = FittedPipeline::from_parts(forest, levels, settings.alpha, test_weight, points, diagnostics);
    pipeline.behavior = Some(behavior_policy);
    Ok(Arc::new(pipeline))
}

/// Fit COPP: calibrate on matched calibration rows with weights
/// `sum_t pi_e(t|x) / pi_b(t|x)`.
pub fn copp_fit(
    data: &BanditDataset,
    target: &SharedPolicy,
    behavior: &BehaviorSource,
    settings: &CoppSettings,
    seed: u64,
) -> Result<CoppModel, ConformalError> {
    fit_pipeline(data, target, behavior, settings, Sampler::Pseudo, seed)?.model(CalibrationMode::Matched)
}

pub fn copp_predict(model: &CoppModel, context: &[f64]) -> Result<PredictionSet, ConformalError> {
    model.predict(context)
}

/// Subsampling comparator: pseudo actions drawn from the target policy and
/// unweighted split conformal on the matched rows.
pub fn subsampling_method(
    data: &BanditDataset,
    target: &SharedPolicy,
    behavior: &BehaviorSource,
    settings: &CoppSettings,
    seed: u64,
) -> Result<CoppModel, ConformalError> {
    fit_pipeline(data, target, behavior, settings, Sampler::Target, seed)?.model(CalibrationMode::Unweighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::DeterministicPolicy;
    use crate::rng::stream;
    use crate::synthetic::{Example1, TargetKind};
    use ndarray::Array2;
    use rand::Rng;

    fn small_forest() -> ForestConfig {
        ForestConfig::default().with_trees(50)
    }

    fn settings() -> CoppSettings {
        CoppSettings::default().with_forest(small_forest())
    }

    #[test]
    fn no_shift_deterministic_reduces_to_split_cqr() {
        // Every logged action is 1 and both policies always choose 1.
        let mut rng = stream(1, 0, "d");
        let n = 400;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..n).map(|i| x[[i, 0]] * 4.0 + rng.random::<f64>()).collect();
        let data = BanditDataset::new(x.clone(), vec![1; n], y, 2).unwrap();
        let always = DeterministicPolicy::new(2, |_| 1).shared();
        let model = copp_fit(&data, &always, &BehaviorSource::Known(always.clone()), &settings(), 3).unwrap();
        let d = model.diagnostics();
        assert_eq!(d.n_train_matched, d.n_train);
        assert_eq!(d.n_cal_matched, d.n_cal);
        // Unit weights: Q is the ceil((n_cal + 1)(1 - alpha))-th smallest score.
        let mut s: Vec<f64> = model.pipeline().calibration().iter().map(|c| c.score).collect();
        s.sort_by(f64::total_cmp);
        let k = ((s.len() + 1) as f64 * 0.9).ceil() as usize;
        let (_, _, q) = model.bounds(&[0.3, 0.3]).unwrap();
        assert_eq!(q, s[k - 1]);
    }

    #[test]
    fn same_policies_give_uniform_weights() {
        let ex = Example1::new(false);
        let data = ex.generate(800, &mut stream(2, 0, "d"));
        let b = Example1::behavior_policy();
        let pipe = fit_pipeline(&data, &b, &BehaviorSource::Known(b.clone()), &settings(), Sampler::Pseudo, 5).unwrap();
        for c in pipe.calibration() {
            assert!((c.base_weight - 2.0).abs() < 1e-12);
        }
        let copp = pipe.model(CalibrationMode::Matched).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        let (lo, hi, q) = copp.bounds(&x).unwrap();
        // Same as unit weights on the matched rows.
        let scores: Vec<f64> = pipe.calibration().iter().filter(|c| c.matched).map(|c| c.score).collect();
        let unit = CalibratedScores::new(&scores, &vec![1.0; scores.len()]).quantile(0.9, 1.0);
        assert_eq!(q, unit);
        assert_eq!(copp.predict(&x).unwrap(), PredictionSet::interval(lo - q, hi + q));
    }

    #[test]
    fn zero_quantile_recovers_forest_interval() {
        let ex = Example1::new(false);
        let data = ex.generate(400, &mut stream(3, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let model = copp_fit(&data, &tgt, &BehaviorSource::logistic(), &settings(), 1).unwrap();
        let (lo, hi) = model.pipeline().forest().predict_quantiles(&[0.5; 4], model.pipeline().levels()).unwrap();
        assert_eq!(expand(lo, hi, 0.0), PredictionSet::interval(lo, hi));
    }

    #[test]
    fn matched_calibration_count_matches_expectation() {
        let ex = Example1::new(false);
        let data = ex.generate(2000, &mut stream(4, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let beh = Example1::behavior_policy();
        let model = copp_fit(&data, &tgt, &BehaviorSource::Known(beh.clone()), &settings(), 7).unwrap();
        // E|Z_cal,s| = sum over calibration rows of P(A = T | X_i).
        let pseudo = PseudoPolicy::new(tgt, beh).unwrap();
        let probs: Vec<f64> = model
            .pipeline()
            .calibration()
            .iter()
            .map(|c| pseudo.match_probability(&data.context(c.row).to_vec()))
            .collect();
        let mean: f64 = probs.iter().sum();
        let sd = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();
        let got = model.diagnostics().n_cal_matched as f64;
        assert!((got - mean).abs() < 3.0 * sd, "{got} vs {mean} +- {sd}");
    }

    #[test]
    fn deterministic_under_seed() {
        let ex = Example1::new(false);
        let data = ex.generate(600, &mut stream(5, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let a = copp_fit(&data, &tgt, &BehaviorSource::logistic(), &settings(), 9).unwrap();
        let b = copp_fit(&data, &tgt, &BehaviorSource::logistic(), &settings(), 9).unwrap();
        assert_eq!(a.pipeline().calibration(), b.pipeline().calibration());
        assert_eq!(a.scores(), b.scores());
        let probe = ex.test_sample(50, TargetKind::Stochastic, &mut stream(5, 1, "t"));
        assert_eq!(
            a.predict_batch(probe.contexts.view()).unwrap(),
            b.predict_batch(probe.contexts.view()).unwrap()
        );
    }

    #[test]
    fn length_nondecreasing_in_confidence() {
        let ex = Example1::new(false);
        let data = ex.generate(800, &mut stream(6, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let pipe = fit_pipeline(&data, &tgt, &BehaviorSource::logistic(), &settings(), Sampler::Pseudo, 2).unwrap();
        let probe = ex.test_sample(100, TargetKind::Stochastic, &mut stream(6, 1, "t"));
        let alphas = [0.5, 0.3, 0.2, 0.1, 0.05, 0.01];
        for row in probe.contexts.outer_iter() {
            let x = row.to_vec();
            let mut prev = f64::NEG_INFINITY;
            for &a in &alphas {
                let len = pipe
                    .model_with_alpha(CalibrationMode::Matched, a)
                    .unwrap()
                    .predict(&x)
                    .unwrap()
                    .lebesgue_length();
                assert!(len >= prev);
                prev = len;
            }
        }
    }

    #[test]
    fn indicator_weights_reproduce_matched_intervals() {
        let ex = Example1::new(false);
        let data = ex.generate(1000, &mut stream(7, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let pipe = fit_pipeline(&data, &tgt, &BehaviorSource::logistic(), &settings(), Sampler::Pseudo, 4).unwrap();
        let copp = pipe.model(CalibrationMode::Matched).unwrap();
        let ind = pipe.model(CalibrationMode::IndicatorWeights).unwrap();
        let probe = ex.test_sample(300, TargetKind::Stochastic, &mut stream(7, 1, "t"));
        assert_eq!(
            copp.predict_batch(probe.contexts.view()).unwrap(),
            ind.predict_batch(probe.contexts.view()).unwrap()
        );
    }

    #[test]
    fn empty_matched_calibration_is_an_error() {
        let mut rng = stream(8, 0, "d");
        let x = Array2::from_shape_fn((40, 1), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let forest = crate::forest::fit_forest(x.view(), &y, small_forest(), 1).unwrap();
        let cal = (0..10)
            .map(|row| CalibrationPoint {
                row,
                score: row as f64,
                base_weight: 2.0,
                is_factor: 0.3,
                matched: false,
            })
            .collect();
        let pipe = Arc::new(FittedPipeline::from_parts(
            forest,
            (0.05, 0.95),
            0.1,
            Arc::new(UnitWeight),
            cal,
            Diagnostics::default(),
        ));
        let err = pipe.model(CalibrationMode::Matched).err().unwrap();
        assert!(err.is_empty_calibration());
        assert!(pipe.model(CalibrationMode::Unweighted).is_err());
        // Importance sampling still uses every calibration point.
        let is = pipe.model(CalibrationMode::ImportanceSampling).unwrap();
        assert_eq!(is.scores().len(), 10);
        // Zero-weight points add no mass: indicator weights put everything on infinity.
        let ind = pipe.model(CalibrationMode::IndicatorWeights).unwrap();
        assert!(ind.predict(&[0.5]).unwrap().is_unbounded());
    }
}
