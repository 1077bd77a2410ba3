//! Direct method: weighted conformal prediction with the density-ratio
//! weight `sum_t pi_e f_t(y|x) / sum_t pi_b f_t(y|x)`, which depends on the
//! candidate outcome, so membership is resolved on a grid.

use std::sync::Arc;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::pipeline::{resolve_behavior, Diagnostics};
use super::quantile::{score, CalibratedScores};
use super::{check_alpha, default_levels, BehaviorSource, ConformalError};
use crate::data::BanditDataset;
use crate::forest::{ForestConfig, QuantileForest};
use crate::interval::PredictionSet;
use crate::policy::{SharedPolicy, POSITIVITY_FLOOR};
use crate::rng::{derive_seed, purpose};
use crate::split::{split_indices, SplitSpec, DEFAULT_TRAIN_FRACTION};

/// Densities are floored here before forming ratios.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Per-arm conditional outcome densities `f_t(y | x)`.
pub trait DensityModel: Send + Sync {
    fn num_actions(&self) -> usize;

    fn densities_into(&self, context: &[f64], y: f64, out: &mut [f64]);

    /// Densities at every `ys[j]`, written row-major into `out`
    /// (`ys.len() x num_actions`). Override when per-context work can be
    /// shared across outcomes.
    fn densities_grid(&self, context: &[f64], ys: &[f64], out: &mut [f64]) {
        let m = self.num_actions();
        for (j, &y) in ys.iter().enumerate() {
            self.densities_into(context, y, &mut out[j * m..(j + 1) * m]);
        }
    }
}

type ArmDensity = dyn Fn(usize, &[f64], f64) -> f64 + Send + Sync;

/// Density model from a closure `(arm, x, y) -> f_t(y | x)`.
pub struct FnDensity {
    num_actions: usize,
    f: Box<ArmDensity>,
}

impl FnDensity {
    pub fn new(num_actions: usize, f: impl Fn(usize, &[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            num_actions,
            f: Box::new(f),
        }
    }
}

impl DensityModel for FnDensity {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn densities_into(&self, context: &[f64], y: f64, out: &mut [f64]) {
        for (t, o) in out.iter_mut().enumerate() {
            *o = (self.f)(t, context, y);
        }
    }
}

/// Gaussian arms with mean and variance regressed by forests on each arm's
/// training rows.
pub struct GaussianForestDensity {
    means: Vec<QuantileForest>,
    variances: Vec<QuantileForest>,
}

impl GaussianForestDensity {
    pub fn fit(
        contexts: ArrayView2<'_, f64>,
        actions: &[usize],
        outcomes: &[f64],
        num_actions: usize,
        config: ForestConfig,
        seed: u64,
    ) -> Result<Self, ConformalError> {
        let mut means = Vec::with_capacity(num_actions);
        let mut variances = Vec::with_capacity(num_actions);
        for t in 0..num_actions {
            let rows: Vec<usize> = (0..actions.len()).filter(|&i| actions[i] == t).collect();
            let x = contexts.select(Axis(0), &rows);
            let y: Vec<f64> = rows.iter().map(|&i| outcomes[i]).collect();
            let mut mean = QuantileForest::new(config);
            mean.fit(x.view(), &y, derive_seed(seed, 2 * t as u64, purpose::FOREST))?;
            let fitted = mean.predict_mean_batch(x.view())?;
            let sq: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).collect();
            let mut var = QuantileForest::new(config);
            var.fit(x.view(), &sq, derive_seed(seed, 2 * t as u64 + 1, purpose::FOREST))?;
            means.push(mean);
            variances.push(var);
        }
        Ok(Self { means, variances })
    }
}

impl GaussianForestDensity {
    fn moments(&self, context: &[f64]) -> Vec<(f64, f64)> {
        self.means
            .iter()
            .zip(&self.variances)
            .map(|(m, v)| {
                (
                    m.predict_mean(context).unwrap_or(0.0),
                    v.predict_mean(context).unwrap_or(1.0).max(1e-12),
                )
            })
            .collect()
    }
}

fn gaussian_pdf(y: f64, mean: f64, var: f64) -> f64 {
    (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

impl DensityModel for GaussianForestDensity {
    fn num_actions(&self) -> usize {
        self.means.len()
    }

    fn densities_into(&self, context: &[f64], y: f64, out: &mut [f64]) {
        for (o, (m, v)) in out.iter_mut().zip(self.moments(context)) {
            *o = gaussian_pdf(y, m, v);
        }
    }

    fn densities_grid(&self, context: &[f64], ys: &[f64], out: &mut [f64]) {
        let moments = self.moments(context);
        let m = moments.len();
        for (j, &y) in ys.iter().enumerate() {
            for (t, &(mean, var)) in moments.iter().enumerate() {
                out[j * m + t] = gaussian_pdf(y, mean, var);
            }
        }
    }
}

/// Where the direct method gets its densities.
#[derive(Clone)]
pub enum DensitySource {
    Fixed(Arc<dyn DensityModel>),
    /// Fit [`GaussianForestDensity`] on the training split.
    GaussianForest(ForestConfig),
}

/// Candidate-outcome grid: `points` values evenly spaced over
/// `[min Y - padding R, max Y + padding R]` with `R` the outcome range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub padding: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 512,
            padding: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectSettings {
    pub alpha: f64,
    pub train_fraction: f64,
    pub forest: ForestConfig,
    pub levels: Option<(f64, f64)>,
    pub grid: GridSpec,
}

impl Default for DirectSettings {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            forest: ForestConfig::default(),
            levels: None,
            grid: GridSpec::default(),
        }
    }
}

pub struct DirectModel {
    forest: QuantileForest,
    levels: (f64, f64),
    alpha: f64,
    target: SharedPolicy,
    behavior: SharedPolicy,
    density: Arc<dyn DensityModel>,
    scores: CalibratedScores,
    grid: Vec<f64>,
    step: f64,
    diagnostics: Diagnostics,
}

/// `sum_t pi_e(t|x) f_t(y|x) / sum_t pi_b(t|x) f_t(y|x)` with floored
/// densities and behavior probabilities.
fn ratio(pe: &[f64], pb: &[f64], f: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..f.len() {
        let ft = if f[t].is_finite() { f[t].max(DENSITY_FLOOR) } else { DENSITY_FLOOR };
        num += pe[t] * ft;
        den += pb[t].clamp(POSITIVITY_FLOOR, 1.0 - POSITIVITY_FLOOR) * ft;
    }
    num / den
}

fn density_ratio(
    target: &SharedPolicy,
    behavior: &SharedPolicy,
    density: &dyn DensityModel,
    x: &[f64],
    y: f64,
    buf: &mut [Vec<f64>; 3],
) -> f64 {
    let [pe, pb, f] = buf;
    target.probabilities_into(x, pe);
    behavior.probabilities_into(x, pb);
    density.densities_into(x, y, f);
    ratio(pe, pb, f)
}

impl DirectModel {
    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    fn buffers(&self) -> [Vec<f64>; 3] {
        let m = self.target.num_actions();
        [vec![0.0; m], vec![0.0; m], vec![0.0; m]]
    }

    /// Test weight at `(x, y)`.
    pub fn weight(&self, context: &[f64], y: f64) -> f64 {
        density_ratio(&self.target, &self.behavior, self.density.as_ref(), context, y, &mut self.buffers())
    }

    fn set_from_quantiles(&self, context: &[f64], lo: f64, hi: f64) -> PredictionSet {
        let m = self.target.num_actions();
        let [mut pe, mut pb, _] = self.buffers();
        self.target.probabilities_into(context, &mut pe);
        self.behavior.probabilities_into(context, &mut pb);
        let mut f = vec![0.0; self.grid.len() * m];
        self.density.densities_grid(context, &self.grid, &mut f);
        let half = 0.5 * self.step;
        // Runs of adjacent covered grid points become one piece.
        let mut pieces = Vec::new();
        let mut run: Option<(f64, f64)> = None;
        for (j, &g) in self.grid.iter().enumerate() {
            let w = ratio(&pe, &pb, &f[j * m..(j + 1) * m]);
            if score(g, lo, hi) <= self.scores.quantile(1.0 - self.alpha, w) {
                run = Some(run.map_or((g - half, g + half), |(a, _)| (a, g + half)));
            } else if let Some(r) = run.take() {
                pieces.push(r);
            }
        }
        pieces.extend(run);
        PredictionSet::from_pieces(pieces)
    }

    /// Union of grid cells whose centre `y` satisfies
    /// `S(x, y) <= Q_{1-alpha}(x, y)`.
    pub fn predict(&self, context: &[f64]) -> Result<PredictionSet, ConformalError> {
        let (lo, hi) = self.forest.predict_quantiles(context, self.levels)?;
        Ok(self.set_from_quantiles(context, lo, hi))
    }

    pub fn predict_batch(&self, contexts: ArrayView2<'_, f64>) -> Result<Vec<PredictionSet>, ConformalError> {
        let qs = self.forest.predict_quantiles_batch(contexts, self.levels)?;
        Ok(qs
            .into_iter()
            .zip(contexts.outer_iter())
            .map(|((lo, hi), x)| self.set_from_quantiles(&x.to_vec(), lo, hi))
            .collect())
    }
}

/// Fit the direct method: forest on all training rows, every calibration row
/// weighted by the density ratio at its observed outcome.
pub fn direct_method(
    data: &BanditDataset,
    target: &SharedPolicy,
    behavior: &BehaviorSource,
    density: &DensitySource,
    settings: &DirectSettings,
    seed: u64,
) -> Result<DirectModel, ConformalError> {
    check_alpha(settings.alpha)?;
    if settings.grid.points < 2 {
        return Err(ConformalError::InvalidInput("grid needs at least two points".into()));
    }
    let n = data.len();
    let (train, cal) = split_indices(
        n,
        &SplitSpec::new(settings.train_fraction, derive_seed(seed, 0, purpose::SPLIT)),
    )?;
    let mut diagnostics = Diagnostics {
        n_train: train.len(),
        n_cal: cal.len(),
        n_train_matched: train.len(),
        n_cal_matched: cal.len(),
        ..Default::default()
    };
    let x = data.contexts();
    let y = data.outcomes();
    let train_x = x.select(Axis(0), &train);
    let train_t: Vec<usize> = train.iter().map(|&i| data.actions()[i]).collect();
    let train_y: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let behavior = resolve_behavior(
        behavior,
        train_x.view(),
        &train_t,
        data.num_actions(),
        derive_seed(seed, 0, purpose::PROPENSITY),
        &mut diagnostics,
    )?;
    let density: Arc<dyn DensityModel> = match density {
        DensitySource::Fixed(d) => Arc::clone(d),
        DensitySource::GaussianForest(cfg) => Arc::new(GaussianForestDensity::fit(
            train_x.view(),
            &train_t,
            &train_y,
            data.num_actions(),
            *cfg,
            derive_seed(seed, 1, purpose::FOREST),
        )?),
    };
    if density.num_actions() != data.num_actions() {
        return Err(ConformalError::InvalidInput("density model action count differs from data".into()));
    }
    let mut forest = QuantileForest::new(settings.forest);
    forest.fit(train_x.view(), &train_y, derive_seed(seed, 0, purpose::FOREST))?;
    let levels = settings.levels.unwrap_or_else(|| default_levels(settings.alpha));

    let cal_x = x.select(Axis(0), &cal);
    let qs = forest.predict_quantiles_batch(cal_x.view(), levels)?;
    let m = data.num_actions();
    let mut buf = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    let mut scores = Vec::with_capacity(cal.len());
    let mut weights = Vec::with_capacity(cal.len());
    for (row, (&i, (lo, hi))) in cal.iter().zip(qs).enumerate() {
        let xi = cal_x.row(row).to_vec();
        scores.push(score(y[i], lo, hi));
        weights.push(density_ratio(target, &behavior, density.as_ref(), &xi, y[i], &mut buf));
    }

    let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = settings.grid.padding * (ymax - ymin);
    let (glo, ghi) = (ymin - pad, ymax + pad);
    let points = settings.grid.points;
    let step = (ghi - glo) / (points - 1) as f64;
    let grid = (0..points).map(|k| glo + step * k as f64).collect();

    Ok(DirectModel {
        forest,
        levels,
        alpha: settings.alpha,
        target: Arc::clone(target),
        behavior,
        density,
        scores: CalibratedScores::new(&scores, &weights),
        grid,
        step,
        diagnostics,
    })
}
