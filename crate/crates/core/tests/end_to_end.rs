use copp::conformal::{fit_pipeline, CalibrationMode, Sampler};
use copp::extensions::copp_ms_predict_batch;
use copp::rng::stream;
use copp::sequential::sequential_ms_predict_batch;
use copp::synthetic::{Example1, Example3, SequentialDesign, TargetKind};
use copp::{
    copp_fit, sequential_copp_fit, BanditDataset, BehaviorSource, CoppSettings, ForestConfig, MultiSplitConfig,
    SequentialSettings, StageBehavior, TrajectoryDataset,
};

fn settings() -> CoppSettings {
    CoppSettings::default().with_forest(ForestConfig::default().with_trees(60))
}

fn coverage(sets: &[copp::PredictionSet], outcomes: &[f64]) -> f64 {
    sets.iter().zip(outcomes).filter(|(s, y)| s.contains(**y)).count() as f64 / outcomes.len() as f64
}

#[test]
fn single_stage_coverage_near_nominal() {
    let ex = Example1::new(false);
    let target = Example1::target_policy(TargetKind::Stochastic);
    let mut total = 0.0;
    let reps = 6;
    for rep in 0..reps {
        let data = ex.generate(2000, &mut stream(1, rep, "data"));
        let test = ex.test_sample(2000, TargetKind::Stochastic, &mut stream(1, rep, "test"));
        let model = copp_fit(&data, &target, &BehaviorSource::logistic(), &settings(), rep).unwrap();
        total += coverage(&model.predict_batch(test.contexts.view()).unwrap(), &test.outcomes);
    }
    let mean = total / reps as f64;
    assert!((0.85..=0.96).contains(&mean), "mean coverage {mean}");
}

#[test]
fn csv_round_trip_preserves_fit() {
    let ex = Example1::new(false);
    let data = ex.generate(500, &mut stream(2, 0, "data"));
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    let back = BanditDataset::read_csv(buf.as_slice(), Some(2)).unwrap();
    let target = Example1::target_policy(TargetKind::Stochastic);
    let probe = ex.test_sample(20, TargetKind::Stochastic, &mut stream(2, 0, "test"));
    let a = copp_fit(&data, &target, &BehaviorSource::logistic(), &settings(), 4).unwrap();
    let b = copp_fit(&back, &target, &BehaviorSource::logistic(), &settings(), 4).unwrap();
    assert_eq!(
        a.predict_batch(probe.contexts.view()).unwrap(),
        b.predict_batch(probe.contexts.view()).unwrap()
    );
}

#[test]
fn calibration_modes_share_one_pipeline() {
    let ex = Example1::new(false);
    let data = ex.generate(1000, &mut stream(3, 0, "data"));
    let target = Example1::target_policy(TargetKind::Stochastic);
    let pipe = fit_pipeline(&data, &target, &BehaviorSource::logistic(), &settings(), Sampler::Pseudo, 1).unwrap();
    let matched = pipe.model(CalibrationMode::Matched).unwrap();
    let is = pipe.model(CalibrationMode::ImportanceSampling).unwrap();
    assert_eq!(matched.scores().len(), pipe.diagnostics().n_cal_matched);
    assert_eq!(is.scores().len(), pipe.diagnostics().n_cal);
    assert!(is.effective_sample_size() > matched.effective_sample_size());
}

#[test]
fn multi_split_sets_are_finite_and_repeatable() {
    let ex = Example1::new(false);
    let data = ex.generate(800, &mut stream(4, 0, "data"));
    let probe = ex.test_sample(30, TargetKind::Stochastic, &mut stream(4, 0, "test"));
    let target = Example1::target_policy(TargetKind::Stochastic);
    let config = MultiSplitConfig::default().with_repetitions(8);
    let run = || {
        copp_ms_predict_batch(
            &data,
            &target,
            &BehaviorSource::logistic(),
            &settings(),
            &config,
            &[CalibrationMode::Matched, CalibrationMode::ImportanceSampling],
            probe.contexts.view(),
            9,
        )
        .unwrap()
    };
    let first = run();
    assert_eq!(first.len(), 2);
    assert_eq!(first[0].successes, 8);
    assert!(first[0].sets.iter().all(|s| !s.is_unbounded()));
    assert_eq!(first, run());
}

#[test]
fn sequential_matched_count_falls_with_horizon() {
    let mut counts = Vec::new();
    for h in 3..=5 {
        let design = Example3::new(h);
        let data: TrajectoryDataset = design.generate(2000, &mut stream(5, h as u64, "data"));
        let targets = design.target_policies(TargetKind::Stochastic);
        let behavior = StageBehavior::Known(design.behavior_policies());
        let model =
            sequential_copp_fit(&data, &targets, &behavior, &SequentialSettings::new(settings()), 2).unwrap();
        counts.push(model.diagnostics().n_cal_matched);
    }
    assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
}

#[test]
fn sequential_multi_split_runs_on_example3() {
    let design = Example3::new(3);
    let data = design.generate(1000, &mut stream(6, 0, "data"));
    let test = design.test_sample(50, TargetKind::Stochastic, &mut stream(6, 0, "test"));
    let targets = design.target_policies(TargetKind::Stochastic);
    let out = sequential_ms_predict_batch(
        &data,
        &targets,
        &StageBehavior::Logistic(copp::Penalty::None),
        &SequentialSettings::new(settings()),
        &MultiSplitConfig::default().with_repetitions(5),
        &[CalibrationMode::Matched],
        test.contexts.view(),
        3,
    )
    .unwrap();
    assert_eq!(out[0].sets.len(), 50);
    assert!(out[0].mean_matched_cal > 0.0);
}
