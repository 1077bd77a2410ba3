//! COPP-IS (every calibration point, importance-sampling weights) and
//! multi-split aggregation (COPP-MS / COPP-IS-MS).

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{
    fit_pipeline, BehaviorSource, CalibrationMode, ConformalError, CoppModel, CoppSettings, FittedPipeline, Sampler,
};
use crate::data::BanditDataset;
use crate::interval::PredictionSet;
use crate::policy::SharedPolicy;
use crate::propensity::{select_ridge, Penalty};
use crate::rng::{derive_seed, purpose};
use crate::split::{split_indices, SplitSpec};

/// Fit COPP-IS: the forest still uses matched training rows, but every
/// calibration row enters with weight `pi_a(T_i|X_i) w(X_i)`.
pub fn copp_is_fit(
    data: &BanditDataset,
    target: &SharedPolicy,
    behavior: &BehaviorSource,
    settings: &CoppSettings,
    seed: u64,
) -> Result<CoppModel, ConformalError> {
    fit_pipeline(data, target, behavior, settings, Sampler::Pseudo, seed)?.model(CalibrationMode::ImportanceSampling)
}

/// Significance level used inside each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerSplitLevel {
    /// `alpha` in every split (the empirical configuration).
    #[default]
    Alpha,
    /// `alpha * gamma`, which carries the finite-sample guarantee.
    AlphaGamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiSplitConfig {
    pub repetitions: usize,
    pub gamma: f64,
    pub per_split: PerSplitLevel,
}

impl Default for MultiSplitConfig {
    fn default() -> Self {
        Self {
            repetitions: 100,
            gamma: 0.5,
            per_split: PerSplitLevel::Alpha,
        }
    }
}

impl MultiSplitConfig {
    pub fn with_repetitions(mut self, repetitions: usize) -> Self {
        self.repetitions = repetitions;
        self
    }

    pub fn validate(&self) -> Result<(), ConformalError> {
        if self.repetitions == 0 {
            return Err(ConformalError::InvalidInput("repetitions must be at least 1".into()));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(ConformalError::InvalidInput(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        Ok(())
    }

    pub fn split_alpha(&self, alpha: f64) -> f64 {
        match self.per_split {
            PerSplitLevel::Alpha => alpha,
            PerSplitLevel::AlphaGamma => alpha * self.gamma,
        }
    }
}

/// Number of intervals out of `b` that must contain `y`:
/// `ceil((1 - gamma) b)`, at least 1.
pub fn ms_threshold(b: usize, gamma: f64) -> usize {
    (((1.0 - gamma) * b as f64 - 1e-9).ceil() as usize).max(1)
}

/// Points covered by at least `threshold` of the closed intervals, by an
/// endpoint sweep. Intervals with `lo > hi` are empty and ignored.
pub fn aggregate_bounds(intervals: &[(f64, f64)], threshold: usize) -> PredictionSet {
    let mut events: Vec<(f64, i32)> = Vec::with_capacity(2 * intervals.len());
    for &(lo, hi) in intervals {
        if lo <= hi {
            events.push((lo, 1));
            events.push((hi, -1));
        }
    }
    // Openings sort before closings at the same coordinate: closed intervals
    // that touch overlap at that point.
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let threshold = threshold as i32;
    let mut count = 0;
    let mut start = 0.0;
    let mut pieces = Vec::new();
    for (x, delta) in events {
        let before = count;
        count += delta;
        if before < threshold && count >= threshold {
            start = x;
        } else if before >= threshold && count < threshold {
            pieces.push((start, x));
        }
    }
    PredictionSet::from_pieces(pieces)
}

/// Aggregate prediction sets (each a union of disjoint pieces) by majority
/// vote at level `gamma`.
pub fn aggregate_sets(sets: &[PredictionSet], gamma: f64) -> PredictionSet {
    let pieces: Vec<(f64, f64)> = sets.iter().flat_map(|s| s.pieces().iter().copied()).collect();
    aggregate_bounds(&pieces, ms_threshold(sets.len(), gamma))
}

/// Per-test-point aggregated sets plus bookkeeping for one calibration mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSplitResult {
    pub mode: CalibrationMode,
    pub sets: Vec<PredictionSet>,
    /// Repetitions that produced intervals.
    pub successes: usize,
    pub failures: usize,
    /// Mean matched calibration count over successful repetitions.
    pub mean_matched_cal: f64,
}

/// `[q_lo - Q, q_hi + Q]` per row as raw bounds (`lo > hi` when empty),
/// reusing forest quantiles computed once per pipeline.
fn bounds_from(model: &CoppModel, quantiles: &[(f64, f64)], contexts: ArrayView2<'_, f64>) -> Vec<(f64, f64)> {
    let mut row = Vec::with_capacity(contexts.ncols());
    quantiles
        .iter()
        .zip(contexts.outer_iter())
        .map(|(&(lo, hi), x)| {
            row.clear();
            row.extend(x.iter().copied());
            let q = model.scores().quantile(1.0 - model.alpha(), model.test_weight(&row));
            if q == f64::INFINITY {
                (f64::NEG_INFINITY, f64::INFINITY)
            } else {
                (lo - q, hi + q)
            }
        })
        .collect()
}

/// Run `config.repetitions` independent pipelines (fresh split and fresh
/// pseudo actions each) and aggregate the per-split intervals at every row
/// of `contexts`, once per requested calibration mode.
///
/// A pipeline is produced by `fit(seed_b, alpha_b)`; this lets single- and
/// multi-stage data share the aggregation.
pub fn multi_split_with<F>(
    fit: F,
    config: &MultiSplitConfig,
    modes: &[CalibrationMode],
    alpha: f64,
    contexts: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<Vec<MultiSplitResult>, ConformalError>
where
    F: Fn(u64) -> Result<std::sync::Arc<FittedPipeline>, ConformalError> + Sync,
{
    config.validate()?;
    let split_alpha = config.split_alpha(alpha);
    let per_rep: Vec<Result<Vec<(Vec<(f64, f64)>, usize)>, ConformalError>> = (0..config.repetitions)
        .into_par_iter()
        .map(|b| {
            let pipe = fit(derive_seed(seed, b as u64, purpose::MULTI_SPLIT))?;
            let matched = pipe.diagnostics().n_cal_matched;
            let quantiles = pipe.forest().predict_quantiles_batch(contexts, pipe.levels())?;
            modes
                .iter()
                .map(|&mode| {
                    let model = pipe.model_with_alpha(mode, split_alpha)?;
                    Ok((bounds_from(&model, &quantiles, contexts), matched))
                })
                .collect()
        })
        .collect();
    let mut results = Vec::with_capacity(modes.len());
    for (k, &mode) in modes.iter().enumerate() {
        let mut ok: Vec<&Vec<(f64, f64)>> = Vec::new();
        let mut matched = 0usize;
        let mut failures = 0;
        let mut last_err = None;
        for rep in &per_rep {
            match rep {
                Ok(v) => {
                    ok.push(&v[k].0);
                    matched += v[k].1;
                }
                Err(e) if recoverable(e) => {
                    failures += 1;
                    last_err = Some(e.to_string());
                }
                Err(e) => return Err(ConformalError::InvalidInput(e.to_string())),
            }
        }
        if ok.is_empty() {
            return Err(ConformalError::InvalidInput(format!(
                "all {} repetitions failed; last error: {}",
                config.repetitions,
                last_err.unwrap_or_default()
            )));
        }
        let threshold = ms_threshold(ok.len(), config.gamma);
        let mut column = Vec::with_capacity(ok.len());
        let sets = (0..contexts.nrows())
            .map(|j| {
                column.clear();
                column.extend(ok.iter().map(|b| b[j]));
                aggregate_bounds(&column, threshold)
            })
            .collect();
        results.push(MultiSplitResult {
            mode,
            sets,
            successes: ok.len(),
            failures,
            mean_matched_cal: matched as f64 / ok.len() as f64,
        });
    }
    Ok(results)
}

/// Repetitions that fail for lack of matched rows are skipped, not fatal.
fn recoverable(e: &ConformalError) -> bool {
    matches!(
        e,
        ConformalError::EmptyCalibration { .. } | ConformalError::Forest(_) | ConformalError::Propensity(_)
    )
}

/// Resolve a cross-validated penalty once, on repetition 0's training rows,
/// so every repetition reuses the same ridge strength.
pub(crate) fn pin_penalty(
    behavior: &BehaviorSource,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_actions: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<BehaviorSource, ConformalError> {
    match behavior {
        BehaviorSource::Logistic(Penalty::RidgeCv) => {
            let seed0 = derive_seed(seed, 0, purpose::MULTI_SPLIT);
            let (train, _) = split_indices(
                labels.len(),
                &SplitSpec::new(train_fraction, derive_seed(seed0, 0, purpose::SPLIT)),
            )?;
            let x = features.select(Axis(0), &train);
            let t: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let report = select_ridge(x.view(), &t, num_actions, derive_seed(seed0, 0, purpose::PROPENSITY))?;
            Ok(BehaviorSource::Logistic(Penalty::Ridge(report.chosen)))
        }
        other => Ok(other.clone()),
    }
}

/// COPP-MS / COPP-IS-MS on single-stage data for every row of `contexts`.
pub fn copp_ms_predict_batch(
    data: &BanditDataset,
    target: &SharedPolicy,
    behavior: &BehaviorSource,
    settings: &CoppSettings,
    config: &MultiSplitConfig,
    modes: &[CalibrationMode],
    contexts: ArrayView2<'_, f64>,
    seed: u64,
) -> Result<Vec<MultiSplitResult>, ConformalError> {
    let behavior = pin_penalty(
        behavior,
        data.contexts(),
        data.actions(),
        data.num_actions(),
        settings.train_fraction,
        seed,
    )?;
    let split_settings = CoppSettings {
        alpha: config.split_alpha(settings.alpha),
        ..settings.clone()
    };
    multi_split_with(
        |s| fit_pipeline(data, target, &behavior, &split_settings, Sampler::Pseudo, s),
        config,
        modes,
        settings.alpha,
        contexts,
        seed,
    )
}

/// COPP-MS at a single context.
pub fn copp_ms_predict(
    data: &BanditDataset,
    target: &SharedPolicy,
    behavior: &BehaviorSource,
    settings: &CoppSettings,
    config: &MultiSplitConfig,
    context: &[f64],
    seed: u64,
) -> Result<PredictionSet, ConformalError> {
    let x = ndarray::ArrayView2::from_shape((1, context.len()), context)
        .map_err(|e| ConformalError::InvalidInput(e.to_string()))?;
    let mut r = copp_ms_predict_batch(
        data,
        target,
        behavior,
        settings,
        config,
        &[CalibrationMode::Matched],
        x,
        seed,
    )?;
    Ok(r.remove(0).sets.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{copp_fit, CoppSettings};
    use crate::forest::ForestConfig;
    use crate::rng::stream;
    use crate::synthetic::{Example1, TargetKind};
    use proptest::prelude::*;
    use rand::Rng;

    fn settings() -> CoppSettings {
        CoppSettings::default().with_forest(ForestConfig::default().with_trees(30))
    }

    /// Fine-grid membership count oracle.
    fn grid_count(intervals: &[(f64, f64)], threshold: usize, y: f64) -> bool {
        intervals.iter().filter(|&&(a, b)| a <= y && y <= b).count() >= threshold
    }

    #[test]
    fn threshold_values() {
        assert_eq!(ms_threshold(3, 0.5), 2);
        assert_eq!(ms_threshold(100, 0.5), 50);
        assert_eq!(ms_threshold(1, 0.9), 1);
        assert_eq!(ms_threshold(10, 0.3), 7);
    }

    #[test]
    fn sweep_examples() {
        let agg = aggregate_bounds(&[(0.0, 2.0), (1.0, 3.0), (10.0, 11.0)], 2);
        assert_eq!(agg, PredictionSet::interval(1.0, 2.0));
        let single = [(0.5, 4.0)];
        assert_eq!(aggregate_bounds(&single, ms_threshold(1, 0.7)), PredictionSet::interval(0.5, 4.0));
        let same = [(1.0, 2.0); 5];
        assert_eq!(aggregate_bounds(&same, ms_threshold(5, 0.5)), PredictionSet::interval(1.0, 2.0));
        let unbounded = [(f64::NEG_INFINITY, f64::INFINITY), (0.0, 1.0)];
        assert_eq!(aggregate_bounds(&unbounded, 1), PredictionSet::full());
        assert_eq!(aggregate_bounds(&unbounded, 2), PredictionSet::interval(0.0, 1.0));
        assert!(aggregate_bounds(&[(2.0, 1.0)], 1).is_empty());
    }

    #[test]
    fn sweep_matches_grid_counting() {
        let mut rng = stream(21, 0, "ms");
        for _ in 0..100 {
            let b = rng.random_range(1..12);
            let intervals: Vec<(f64, f64)> = (0..b)
                .map(|_| {
                    let a = rng.random::<f64>() * 10.0;
                    (a, a + rng.random::<f64>() * 4.0)
                })
                .collect();
            let gamma = rng.random_range(0.05..0.95);
            let k = ms_threshold(b, gamma);
            let agg = aggregate_bounds(&intervals, k);
            for j in 0..=10_000 {
                let y = -1.0 + 16.0 * j as f64 / 10_000.0;
                assert_eq!(agg.contains(y), grid_count(&intervals, k, y), "y = {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn larger_gamma_gives_superset(
            raw in proptest::collection::vec((0.0f64..10.0, 0.0f64..3.0), 1..15),
            g1 in 0.05f64..0.95,
            g2 in 0.05f64..0.95,
            probes in proptest::collection::vec(-1.0f64..14.0, 50),
        ) {
            let intervals: Vec<(f64, f64)> = raw.iter().map(|&(a, w)| (a, a + w)).collect();
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let small = aggregate_bounds(&intervals, ms_threshold(intervals.len(), lo));
            let big = aggregate_bounds(&intervals, ms_threshold(intervals.len(), hi));
            for y in probes {
                prop_assert!(!small.contains(y) || big.contains(y));
            }
        }
    }

    #[test]
    fn single_repetition_equals_single_split() {
        let ex = Example1::new(false);
        let data = ex.generate(800, &mut stream(3, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let beh = BehaviorSource::logistic();
        let probe = ex.test_sample(40, TargetKind::Stochastic, &mut stream(3, 1, "t"));
        let cfg = MultiSplitConfig::default().with_repetitions(1);
        let seed = 17;
        let ms = copp_ms_predict_batch(
            &data,
            &tgt,
            &beh,
            &settings(),
            &cfg,
            &[CalibrationMode::Matched],
            probe.contexts.view(),
            seed,
        )
        .unwrap();
        let single = copp_fit(&data, &tgt, &beh, &settings(), derive_seed(seed, 0, purpose::MULTI_SPLIT)).unwrap();
        assert_eq!(ms[0].sets, single.predict_batch(probe.contexts.view()).unwrap());
    }

    #[test]
    fn p_value_region_matches_interval() {
        let ex = Example1::new(false);
        let data = ex.generate(1000, &mut stream(4, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let model = copp_fit(&data, &tgt, &BehaviorSource::logistic(), &settings(), 2).unwrap();
        let probe = ex.test_sample(200, TargetKind::Stochastic, &mut stream(4, 1, "t"));
        let mut rng = stream(4, 2, "y");
        for row in probe.contexts.outer_iter() {
            let x = row.to_vec();
            let set = model.predict(&x).unwrap();
            let (lo, hi) = set.hull().unwrap();
            // Probe a grid around the interval plus random points.
            let mut ys: Vec<f64> = (0..=40).map(|k| lo - 2.0 + (hi - lo + 4.0) * k as f64 / 40.0).collect();
            ys.push(rng.random::<f64>() * 40.0 - 20.0);
            for y in ys {
                let p = model.p_value(&x, y).unwrap();
                assert_eq!(p >= model.alpha(), set.contains(y), "y = {y}, p = {p}");
            }
        }
    }

    #[test]
    fn p_value_limits() {
        let ex = Example1::new(false);
        let data = ex.generate(800, &mut stream(5, 0, "d"));
        let tgt = Example1::target_policy(TargetKind::Stochastic);
        let model = copp_fit(&data, &tgt, &BehaviorSource::logistic(), &settings(), 3).unwrap();
        let x = [0.4, 0.6, 0.2, 0.8];
        let w = model.test_weight(&x);
        let p_inf = w / (model.scores().total_weight() + w);
        assert!((model.p_value(&x, 1e9).unwrap() - p_inf).abs() < 1e-12);
        assert!((model.p_value(&x, -1e9).unwrap() - p_inf).abs() < 1e-12);
    }
}
