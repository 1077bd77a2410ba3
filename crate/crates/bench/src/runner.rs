//! Replicated simulation runs.

use std::collections::BTreeMap;

use copp::baselines::{importance_ratios, mean_regression, select_bandwidth, trajectory_ratios, KernelConfig, KernelEstimator};
use copp::conformal::{
    direct_method, fit_pipeline, subsampling_method, BehaviorSource, CalibrationMode, CoppModel, CoppSettings,
    DensitySource, DirectSettings, Sampler,
};
use copp::extensions::{copp_ms_predict_batch, MultiSplitResult};
use copp::propensity::fit_with_penalty;
use copp::rng::{derive_seed, purpose, stream};
use copp::sequential::{
    fit_sequential_pipeline, fit_stage_policies, sequential_ms_predict_batch, sequential_subsampling_method,
    SequentialSettings, StageBehavior,
};
use copp::synthetic::{Example1, Example2, Example3, ScenarioSpec, SequentialDesign, TestSample};
use copp::{BanditDataset, PredictionSet, SharedPolicy, TrajectoryDataset};
use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{BehaviorModel, ConfigError, ExperimentConfig, Method};
use crate::report::{ExperimentReport, ReplicateRecord};

/// Test points used when tuning kernel bandwidths.
pub const TUNING_TEST_POINTS: usize = 2000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bandwidth tuning failed: {0}")]
    Tuning(String),
}

/// Coverage and mean Lebesgue length of `sets` against realized outcomes.
pub fn evaluate(sets: &[PredictionSet], outcomes: &[f64]) -> (f64, f64) {
    let n = outcomes.len() as f64;
    let hits = sets.iter().zip(outcomes).filter(|(s, y)| s.contains(**y)).count();
    let length = sets.iter().map(PredictionSet::lebesgue_length).sum::<f64>() / n;
    (hits as f64 / n, length)
}

enum Design {
    Single(Example1),
    Multi(Box<dyn SequentialDesign + Send>),
}

impl Design {
    fn of(spec: &ScenarioSpec) -> Self {
        match spec.example {
            1 => Design::Single(Example1::new(spec.high_dim)),
            2 => Design::Multi(Box::new(Example2::new(spec.high_dim))),
            _ => Design::Multi(Box::new(Example3::new(spec.horizon.unwrap_or(3)))),
        }
    }
}

/// One simulated dataset with its test sample.
enum Replica {
    Single(BanditDataset),
    Multi(TrajectoryDataset),
}

struct Setup<'a> {
    cfg: &'a ExperimentConfig,
    design: Design,
}

/// Result of one method on one replicate.
struct Outcome {
    sets: Vec<PredictionSet>,
    matched: Option<f64>,
    ess: Option<f64>,
}

impl Outcome {
    fn from_model(model: &CoppModel, test: &TestSample) -> Result<Self, String> {
        let sets = model.predict_batch(test.contexts.view()).map_err(|e| e.to_string())?;
        Ok(Self {
            sets,
            matched: Some(model.diagnostics().n_cal_matched as f64),
            ess: Some(model.effective_sample_size()),
        })
    }

    fn from_multi(r: &MultiSplitResult) -> Self {
        Self {
            sets: r.sets.clone(),
            matched: Some(r.mean_matched_cal),
            ess: None,
        }
    }
}

impl<'a> Setup<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Self {
            cfg,
            design: Design::of(&cfg.scenario),
        }
    }

    fn generate(&self, data_rng_rep: u64, test_rng_rep: u64, tag: &str, test_points: usize) -> (Replica, TestSample) {
        let spec = &self.cfg.scenario;
        let seed = self.cfg.master_seed;
        let mut data_rng = stream(seed, data_rng_rep, tag);
        let mut test_rng = stream(seed, test_rng_rep, if tag == purpose::DATA { purpose::TEST } else { tag });
        match &self.design {
            Design::Single(ex) => (
                Replica::Single(ex.generate(spec.n, &mut data_rng)),
                ex.test_sample(test_points, spec.target, &mut test_rng),
            ),
            Design::Multi(d) => (
                Replica::Multi(d.generate(spec.n, &mut data_rng)),
                d.test_sample(test_points, spec.target, &mut test_rng),
            ),
        }
    }

    fn single_target(&self) -> SharedPolicy {
        Example1::target_policy(self.cfg.scenario.target)
    }

    fn behavior_source(&self) -> BehaviorSource {
        match self.cfg.behavior {
            BehaviorModel::Fitted => BehaviorSource::Logistic(self.cfg.penalty),
            BehaviorModel::Known => BehaviorSource::known(Example1::behavior_policy()),
        }
    }

    fn stage_behavior(&self, d: &dyn SequentialDesign) -> StageBehavior {
        match self.cfg.behavior {
            BehaviorModel::Fitted => StageBehavior::Logistic(self.cfg.penalty),
            BehaviorModel::Known => StageBehavior::Known(d.behavior_policies()),
        }
    }

    fn copp_settings(&self, forest: copp::ForestConfig) -> CoppSettings {
        CoppSettings {
            alpha: self.cfg.alpha,
            forest,
            ..CoppSettings::default()
        }
    }

    /// The match-probability classifier shares the behavior penalty.
    fn sequential_settings(&self, forest: copp::ForestConfig) -> SequentialSettings {
        SequentialSettings {
            copp: self.copp_settings(forest),
            match_penalty: self.cfg.match_penalty.unwrap_or(self.cfg.penalty),
        }
    }

    /// Anchors, importance ratios, outcomes and forest means for the kernel
    /// baselines. Nuisances are fitted on the full dataset.
    fn kernel_inputs(&self, replica: &Replica, seed: u64) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>, Vec<f64>), String> {
        let (anchors, ratios, outcomes) = match (replica, &self.design) {
            (Replica::Single(data), _) => {
                let target = self.single_target();
                let ratios = match self.cfg.behavior {
                    BehaviorModel::Known => importance_ratios(data, target.as_ref(), Example1::behavior_policy().as_ref()),
                    BehaviorModel::Fitted => {
                        let model = fit_with_penalty(
                            data.contexts(),
                            data.actions(),
                            data.num_actions(),
                            self.cfg.penalty,
                            derive_seed(seed, 0, purpose::PROPENSITY),
                        )
                        .map_err(|e| e.to_string())?;
                        importance_ratios(data, target.as_ref(), &model)
                    }
                };
                (data.contexts().to_owned(), ratios, data.outcomes().to_vec())
            }
            (Replica::Multi(data), Design::Multi(d)) => {
                let targets = d.target_policies(self.cfg.scenario.target);
                let behaviors = match self.cfg.behavior {
                    BehaviorModel::Known => d.behavior_policies(),
                    BehaviorModel::Fitted => {
                        let all: Vec<usize> = (0..data.len()).collect();
                        fit_stage_policies(data, &all, self.cfg.penalty, seed)
                            .map_err(|e| e.to_string())?
                            .stages()
                            .to_vec()
                    }
                };
                let ratios = trajectory_ratios(data, &targets, &behaviors);
                (data.initial_states().to_owned(), ratios, data.outcomes().to_vec())
            }
            _ => unreachable!("replica matches design"),
        };
        let mu = mean_regression(anchors.view(), &outcomes, self.cfg.forest, seed).map_err(|e| e.to_string())?;
        Ok((anchors, ratios, outcomes, mu))
    }

    fn kernel_estimator(
        method: Method,
        inputs: &(Array2<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
        kernel: &KernelConfig,
    ) -> Result<KernelEstimator, copp::baselines::BaselineError> {
        let (anchors, ratios, outcomes, mu) = inputs;
        match method {
            Method::DrCi => KernelEstimator::doubly_robust(anchors.clone(), ratios, outcomes, mu, kernel),
            _ => KernelEstimator::importance_sampling(anchors.clone(), ratios, outcomes, kernel),
        }
    }

    /// Bandwidth multiplier per kernel method, tuned on a dedicated replicate
    /// unless fixed in the config.
    fn tune(&self) -> Result<BTreeMap<Method, f64>, RunError> {
        let kernel_methods: Vec<Method> = self.cfg.methods.iter().copied().filter(|m| m.is_kernel()).collect();
        let mut scales = BTreeMap::new();
        if kernel_methods.is_empty() {
            return Ok(scales);
        }
        if let Some(h) = self.cfg.kernel_scale {
            for m in kernel_methods {
                scales.insert(m, h);
            }
            return Ok(scales);
        }
        let (replica, test) = self.generate(0, 1, purpose::TUNING, self.cfg.test_points.min(TUNING_TEST_POINTS));
        let inputs = self
            .kernel_inputs(&replica, derive_seed(self.cfg.master_seed, 2, purpose::TUNING))
            .map_err(RunError::Tuning)?;
        for m in kernel_methods {
            let build = |scale: f64| {
                Self::kernel_estimator(
                    m,
                    &inputs,
                    &KernelConfig {
                        scale,
                        alpha: self.cfg.alpha,
                    },
                )
            };
            let (scale, _) = select_bandwidth(&self.cfg.kernel_grid, build, test.contexts.view(), &test.outcomes)
                .map_err(|e| RunError::Tuning(e.to_string()))?;
            scales.insert(m, scale);
        }
        Ok(scales)
    }

    fn replicate(&self, rep: usize, scales: &BTreeMap<Method, f64>) -> Vec<ReplicateRecord> {
        let (replica, test) = self.generate(rep as u64, rep as u64, purpose::DATA, self.cfg.test_points);
        let seed = derive_seed(self.cfg.master_seed, rep as u64, purpose::REPLICATE);
        let mut outcomes: BTreeMap<Method, Result<Outcome, String>> = BTreeMap::new();
        let methods = &self.cfg.methods;
        let wants = |m: Method| methods.contains(&m);

        // COPP and COPP-IS share one pipeline.
        if wants(Method::Copp) || wants(Method::CoppIs) {
            let pipe = match (&replica, &self.design) {
                (Replica::Single(data), _) => fit_pipeline(
                    data,
                    &self.single_target(),
                    &self.behavior_source(),
                    &self.copp_settings(self.cfg.forest),
                    Sampler::Pseudo,
                    seed,
                ),
                (Replica::Multi(data), Design::Multi(d)) => fit_sequential_pipeline(
                    data,
                    &d.target_policies(self.cfg.scenario.target),
                    &self.stage_behavior(d.as_ref()),
                    &self.sequential_settings(self.cfg.forest),
                    seed,
                ),
                _ => unreachable!("replica matches design"),
            };
            for (m, mode) in [
                (Method::Copp, CalibrationMode::Matched),
                (Method::CoppIs, CalibrationMode::ImportanceSampling),
            ] {
                if wants(m) {
                    let r = match &pipe {
                        Ok(p) => p
                            .model(mode)
                            .map_err(|e| e.to_string())
                            .and_then(|model| Outcome::from_model(&model, &test)),
                        Err(e) => Err(e.to_string()),
                    };
                    outcomes.insert(m, r);
                }
            }
        }

        if wants(Method::Sm) {
            let model = match (&replica, &self.design) {
                (Replica::Single(data), _) => subsampling_method(
                    data,
                    &self.single_target(),
                    &self.behavior_source(),
                    &self.copp_settings(self.cfg.forest),
                    seed,
                ),
                (Replica::Multi(data), Design::Multi(d)) => sequential_subsampling_method(
                    data,
                    &d.target_policies(self.cfg.scenario.target),
                    &self.stage_behavior(d.as_ref()),
                    &self.sequential_settings(self.cfg.forest),
                    seed,
                ),
                _ => unreachable!("replica matches design"),
            };
            outcomes.insert(
                Method::Sm,
                model
                    .map_err(|e| e.to_string())
                    .and_then(|m| Outcome::from_model(&m, &test)),
            );
        }

        let ms_modes: Vec<(Method, CalibrationMode)> = [
            (Method::CoppMs, CalibrationMode::Matched),
            (Method::CoppIsMs, CalibrationMode::ImportanceSampling),
        ]
        .into_iter()
        .filter(|(m, _)| wants(*m))
        .collect();
        if !ms_modes.is_empty() {
            let modes: Vec<CalibrationMode> = ms_modes.iter().map(|(_, c)| *c).collect();
            let settings = self.copp_settings(self.cfg.ms_forest);
            let result = match (&replica, &self.design) {
                (Replica::Single(data), _) => copp_ms_predict_batch(
                    data,
                    &self.single_target(),
                    &self.behavior_source(),
                    &settings,
                    &self.cfg.ms,
                    &modes,
                    test.contexts.view(),
                    seed,
                ),
                (Replica::Multi(data), Design::Multi(d)) => sequential_ms_predict_batch(
                    data,
                    &d.target_policies(self.cfg.scenario.target),
                    &self.stage_behavior(d.as_ref()),
                    &SequentialSettings {
                        copp: settings,
                        match_penalty: self.cfg.match_penalty.unwrap_or(self.cfg.penalty),
                    },
                    &self.cfg.ms,
                    &modes,
                    test.contexts.view(),
                    seed,
                ),
                _ => unreachable!("replica matches design"),
            };
            for (k, (m, _)) in ms_modes.iter().enumerate() {
                let r = match &result {
                    Ok(v) => Ok(Outcome::from_multi(&v[k])),
                    Err(e) => Err(e.to_string()),
                };
                outcomes.insert(*m, r);
            }
        }

        if let Replica::Single(data) = &replica {
            for (m, model) in [
                (Method::DmTrue, Example1::oracle_density_model()),
                (Method::DmFalse, Example1::misspecified_density_model()),
            ] {
                if !wants(m) {
                    continue;
                }
                let settings = DirectSettings {
                    alpha: self.cfg.alpha,
                    forest: self.cfg.forest,
                    grid: self.cfg.dm_grid,
                    ..DirectSettings::default()
                };
                let r = direct_method(
                    data,
                    &self.single_target(),
                    &self.behavior_source(),
                    &DensitySource::Fixed(model),
                    &settings,
                    seed,
                )
                .and_then(|dm| {
                    let sets = dm.predict_batch(test.contexts.view())?;
                    Ok(Outcome {
                        sets,
                        matched: Some(dm.diagnostics().n_cal as f64),
                        ess: None,
                    })
                })
                .map_err(|e| e.to_string());
                outcomes.insert(m, r);
            }
        }

        if methods.iter().any(|m| m.is_kernel()) {
            let inputs = self.kernel_inputs(&replica, seed);
            for &m in methods.iter().filter(|m| m.is_kernel()) {
                let r = inputs.as_ref().map_err(Clone::clone).and_then(|inputs| {
                    let kernel = KernelConfig {
                        scale: scales[&m],
                        alpha: self.cfg.alpha,
                    };
                    let est = Self::kernel_estimator(m, inputs, &kernel).map_err(|e| e.to_string())?;
                    let cis = est.interval_batch(test.contexts.view()).map_err(|e| e.to_string())?;
                    Ok(Outcome {
                        sets: cis.iter().map(|c| PredictionSet::interval(c.lower, c.upper)).collect(),
                        matched: None,
                        ess: None,
                    })
                });
                outcomes.insert(m, r);
            }
        }

        methods
            .iter()
            .map(|&m| match outcomes.remove(&m) {
                Some(Ok(o)) => {
                    let (coverage, length) = evaluate(&o.sets, &test.outcomes);
                    ReplicateRecord {
                        method: m,
                        replication: rep,
                        coverage: Some(coverage),
                        avg_length: Some(length),
                        n_matched_cal: o.matched,
                        effective_sample_size: o.ess,
                        failed: false,
                        error: None,
                    }
                }
                Some(Err(e)) => ReplicateRecord::failure(m, rep, e),
                None => ReplicateRecord::failure(m, rep, "method already reported".into()),
            })
            .collect()
    }
}

/// Run every replicate (in parallel on the current rayon pool) and assemble
/// the report in replicate order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, RunError> {
    run_experiment_with_progress(cfg, |_| {})
}

/// As [`run_experiment`], calling `progress(rep)` as replicates finish.
pub fn run_experiment_with_progress<F>(cfg: &ExperimentConfig, progress: F) -> Result<ExperimentReport, RunError>
where
    F: Fn(usize) + Sync,
{
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let mut seen = std::collections::BTreeSet::new();
    cfg.methods.retain(|m| seen.insert(*m));
    let setup = Setup::new(&cfg);
    let scales = setup.tune()?;
    let records: Vec<Vec<ReplicateRecord>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            let r = setup.replicate(rep, &scales);
            progress(rep);
            r
        })
        .collect();
    let records = records.into_iter().flatten().collect();
    Ok(ExperimentReport::new(cfg, scales, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_line_has_full_coverage_and_infinite_length() {
        let (c, l) = evaluate(&[PredictionSet::full()], &[3.0]);
        assert_eq!(c, 1.0);
        assert_eq!(l, f64::INFINITY);
    }

    #[test]
    fn coverage_counts_hits() {
        let sets = vec![PredictionSet::interval(0.0, 1.0); 4];
        let (c, l) = evaluate(&sets, &[0.5, 2.0, 1.0, -0.1]);
        assert_eq!(c, 0.5);
        assert_eq!(l, 1.0);
    }
}
