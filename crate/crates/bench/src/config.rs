//! Experiment configuration (JSON).

use std::fmt;
use std::str::FromStr;

use copp::baselines::BANDWIDTH_GRID;
use copp::conformal::GridSpec;
use copp::extensions::MultiSplitConfig;
use copp::synthetic::ScenarioSpec;
use copp::{ForestConfig, Penalty};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid scenario: {0}")]
    Scenario(#[from] copp::synthetic::ScenarioError),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "COPP")]
    Copp,
    #[serde(rename = "COPP-IS")]
    CoppIs,
    #[serde(rename = "COPP-MS")]
    CoppMs,
    #[serde(rename = "COPP-IS-MS")]
    CoppIsMs,
    #[serde(rename = "SM")]
    Sm,
    #[serde(rename = "DM-true")]
    DmTrue,
    #[serde(rename = "DM-false")]
    DmFalse,
    #[serde(rename = "IS-CI")]
    IsCi,
    #[serde(rename = "DR-CI")]
    DrCi,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Copp,
        Method::CoppIs,
        Method::CoppMs,
        Method::CoppIsMs,
        Method::Sm,
        Method::DmTrue,
        Method::DmFalse,
        Method::IsCi,
        Method::DrCi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Copp => "COPP",
            Method::CoppIs => "COPP-IS",
            Method::CoppMs => "COPP-MS",
            Method::CoppIsMs => "COPP-IS-MS",
            Method::Sm => "SM",
            Method::DmTrue => "DM-true",
            Method::DmFalse => "DM-false",
            Method::IsCi => "IS-CI",
            Method::DrCi => "DR-CI",
        }
    }

    pub fn is_multi_split(self) -> bool {
        matches!(self, Method::CoppMs | Method::CoppIsMs)
    }

    pub fn is_direct(self) -> bool {
        matches!(self, Method::DmTrue | Method::DmFalse)
    }

    pub fn is_kernel(self) -> bool {
        matches!(self, Method::IsCi | Method::DrCi)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::UnknownMethod(s.to_string()))
    }
}

/// Parse a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>, ConfigError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// How the behavior policy enters the conformal methods and baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorModel {
    /// Logistic regression on the logged data.
    #[default]
    Fitted,
    /// The generating policy is handed to every method.
    Known,
}

fn default_forest() -> ForestConfig {
    ForestConfig::default().with_trees(100)
}

fn default_ms_forest() -> ForestConfig {
    ForestConfig::default().with_trees(50)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub replications: usize,
    pub test_points: usize,
    pub ms: MultiSplitConfig,
    pub master_seed: u64,
    pub behavior: BehaviorModel,
    pub penalty: Penalty,
    /// Penalty of the multi-stage match-probability classifier; defaults to
    /// `penalty`.
    pub match_penalty: Option<Penalty>,
    /// Forest for single-split methods and the direct method.
    pub forest: ForestConfig,
    /// Forest used inside each multi-split repetition.
    pub ms_forest: ForestConfig,
    pub dm_grid: GridSpec,
    /// Candidate kernel bandwidth multipliers for IS-CI / DR-CI.
    pub kernel_grid: Vec<f64>,
    /// Skip tuning and use this multiplier.
    pub kernel_scale: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::example1(2000, false),
            methods: vec![Method::Copp],
            alpha: 0.1,
            replications: 100,
            test_points: 10_000,
            ms: MultiSplitConfig::default(),
            master_seed: 0,
            behavior: BehaviorModel::Fitted,
            penalty: Penalty::None,
            match_penalty: None,
            forest: default_forest(),
            ms_forest: default_ms_forest(),
            dm_grid: GridSpec::default(),
            kernel_grid: BANDWIDTH_GRID.to_vec(),
            kernel_scale: None,
        }
    }
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioSpec, methods: Vec<Method>) -> Self {
        Self {
            scenario,
            methods,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        if self.methods.is_empty() {
            return Err(ConfigError::Invalid("methods must not be empty".into()));
        }
        if self.replications == 0 {
            return Err(ConfigError::Invalid("replications must be at least 1".into()));
        }
        if self.test_points == 0 {
            return Err(ConfigError::Invalid("test_points must be at least 1".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(ConfigError::Invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        self.ms
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.scenario.is_sequential() {
            if let Some(m) = self.methods.iter().find(|m| m.is_direct()) {
                return Err(ConfigError::Invalid(format!("{m} needs a single-stage scenario")));
            }
        }
        if self.methods.iter().any(|m| m.is_kernel())
            && self.kernel_scale.is_none()
            && (self.kernel_grid.is_empty() || self.kernel_grid.iter().any(|&h| !(h > 0.0)))
        {
            return Err(ConfigError::Invalid("kernel_grid must hold positive values".into()));
        }
        if matches!(self.kernel_scale, Some(h) if !(h > 0.0)) {
            return Err(ConfigError::Invalid("kernel_scale must be positive".into()));
        }
        Ok(())
    }
}
