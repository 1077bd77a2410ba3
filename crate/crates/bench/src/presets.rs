//! Preset experiment grids matching the published simulation figures.

use copp::propensity::Penalty;
use copp::synthetic::{ScenarioSpec, TargetKind};

use crate::config::{ExperimentConfig, Method};

/// Knobs shared by every preset.
#[derive(Debug, Clone)]
pub struct PresetOptions {
    pub replications: usize,
    pub master_seed: u64,
    pub test_points: usize,
    pub n: usize,
    /// Replace each preset's method list.
    pub methods: Option<Vec<Method>>,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            replications: 100,
            master_seed: 0,
            test_points: 10_000,
            n: 2000,
            methods: None,
        }
    }
}

impl PresetOptions {
    fn build(&self, scenario: ScenarioSpec, methods: &[Method]) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(scenario, self.methods.clone().unwrap_or_else(|| methods.to_vec()));
        cfg.replications = self.replications;
        cfg.master_seed = self.master_seed;
        cfg.test_points = self.test_points;
        cfg
    }
}

/// A labelled experiment.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Direct method with correct and misspecified densities, subsampling and
/// COPP on Example 1 under stochastic and deterministic targets. With the
/// default `n = 2000` the calibration half holds 500 points.
pub fn figure2(opts: &PresetOptions) -> Vec<Cell> {
    let methods = [Method::DmTrue, Method::DmFalse, Method::Sm, Method::Copp];
    [TargetKind::Stochastic, TargetKind::Deterministic]
        .into_iter()
        .map(|target| {
            let spec = ScenarioSpec::example1(opts.n, false).with_target(target);
            let name = match target {
                TargetKind::Stochastic => "stochastic",
                TargetKind::Deterministic => "deterministic",
            };
            Cell {
                label: format!("figure2-{name}"),
                config: opts.build(spec, &methods),
            }
        })
        .collect()
}

/// Examples 1 and 2 in low and high dimension. Kernel baselines run in the
/// low-dimensional settings only. High-dimensional cells fit propensities
/// with cross-validated ridge and use 50 multi-split repetitions.
pub fn figure3(opts: &PresetOptions) -> Vec<Cell> {
    let conformal = [Method::Copp, Method::CoppIs, Method::CoppMs, Method::CoppIsMs, Method::Sm];
    let mut cells = Vec::new();
    for example in [1u8, 2] {
        for high_dim in [false, true] {
            let spec = if example == 1 {
                ScenarioSpec::example1(opts.n, high_dim)
            } else {
                ScenarioSpec::example2(opts.n, high_dim)
            };
            let mut methods = conformal.to_vec();
            if !high_dim {
                methods.extend([Method::IsCi, Method::DrCi]);
            }
            let mut cfg = opts.build(spec, &methods);
            if high_dim {
                cfg.ms.repetitions = 50;
                cfg.penalty = Penalty::RidgeCv;
            }
            cells.push(Cell {
                label: format!("figure3-{}", spec.label()),
                config: cfg,
            });
        }
    }
    cells
}

/// Example 3 at horizons 3, 4 and 5.
pub fn figure4(opts: &PresetOptions) -> Vec<Cell> {
    let methods = [Method::Copp, Method::CoppIs, Method::CoppMs, Method::CoppIsMs, Method::Sm];
    (3..=5)
        .map(|h| {
            let spec = ScenarioSpec::example3(opts.n, h);
            Cell {
                label: format!("figure4-{}", spec.label()),
                config: opts.build(spec, &methods),
            }
        })
        .collect()
}
