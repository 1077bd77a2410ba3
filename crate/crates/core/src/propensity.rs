//! Behavior-policy estimation and the pseudo policy.
//!
//! The behavior policy is fit by (ridge-penalized) multinomial logistic
//! regression with class 0 as the reference. The pseudo policy reweights the
//! target policy by the inverse behavior propensity so that subsamples whose
//! pseudo action matches the logged action carry the target outcome
//! distribution.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{clip_probabilities, Policy, PolicyKind, SharedPolicy, POSITIVITY_FLOOR};
use crate::rng::{substream, StreamRng};

#[derive(Debug, Error)]
pub enum PropensityError {
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("policies disagree on the number of actions ({target} vs {behavior})")]
    ActionCountMismatch { target: usize, behavior: usize },
}

/// Log-spaced ridge grid, `1e-4 ..= 1` over standardized features.
pub fn ridge_grid() -> [f64; 10] {
    let mut g = [0.0; 10];
    for (k, v) in g.iter_mut().enumerate() {
        *v = 10f64.powf(-4.0 + 4.0 * k as f64 / 9.0);
    }
    g
}

pub const CV_FOLDS: usize = 5;
pub const MAX_ITERATIONS: usize = 100;
pub const COEF_TOLERANCE: f64 = 1e-8;

/// How the logistic penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    None,
    Ridge(f64),
    /// 5-fold cross-validated log-likelihood over [`ridge_grid`].
    RidgeCv,
}

/// Fitted multinomial logistic regression.
///
/// `coefficients[t - 1]` holds `(intercept, slopes...)` for class `t` against
/// the reference class 0, on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub num_actions: usize,
    pub ridge_lambda: f64,
    pub coefficients: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the solver did not reach a finite optimum: the iteration cap
    /// was hit, the line search stalled, or the classes are separable.
    pub max_iterations_reached: bool,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    POSITIVITY_FLOOR
}

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.coefficients[0].len() - 1
    }

    /// Unclipped class probabilities.
    pub fn raw_probabilities_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        let mut max_eta = 0.0f64;
        for (t, beta) in self.coefficients.iter().enumerate() {
            let eta = beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
            out[t + 1] = eta;
            max_eta = max_eta.max(eta);
        }
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max_eta).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn shared(self) -> SharedPolicy {
        Arc::new(self)
    }
}

impl Policy for LogisticModel {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn kind(&self) -> PolicyKind {
        PolicyKind::FittedLogistic
    }

    fn probabilities_into(&self, context: &[f64], out: &mut [f64]) {
        self.raw_probabilities_into(context, out);
        clip_probabilities(out, self.floor);
    }
}

struct Standardized {
    design: DMatrix<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

fn standardize(features: ArrayView2<'_, f64>, rows: &[usize]) -> Standardized {
    let d = features.ncols();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for j in 0..d {
        let m = rows.iter().map(|&i| features[[i, j]]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|&i| (features[[i, j]] - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        scale[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
    }
    let design = DMatrix::from_fn(n, d + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            (features[[rows[r], c - 1]] - mean[c - 1]) / scale[c - 1]
        }
    });
    Standardized { design, mean, scale }
}

struct NewtonResult {
    beta: Vec<DVector<f64>>,
    iterations: usize,
    converged: bool,
}

fn class_probs(design: &DMatrix<f64>, beta: &[DVector<f64>]) -> DMatrix<f64> {
    let n = design.nrows();
    let m = beta.len() + 1;
    let mut probs = DMatrix::zeros(n, m);
    for (t, b) in beta.iter().enumerate() {
        let eta = design * b;
        probs.set_column(t + 1, &eta);
    }
    for i in 0..n {
        let mx = (1..m).map(|t| probs[(i, t)]).fold(0.0f64, f64::max);
        let mut total = 0.0;
        for t in 0..m {
            let v = (probs[(i, t)] - mx).exp();
            probs[(i, t)] = v;
            total += v;
        }
        for t in 0..m {
            probs[(i, t)] /= total;
        }
    }
    probs
}

fn objective(design: &DMatrix<f64>, labels: &[usize], beta: &[DVector<f64>], lambda: f64) -> f64 {
    let probs = class_probs(design, beta);
    let n = labels.len() as f64;
    let nll = -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs[(i, y)].max(1e-300).ln())
        .sum::<f64>()
        / n;
    let pen: f64 = beta.iter().map(|b| b.rows(1, b.len() - 1).norm_squared()).sum();
    nll + 0.5 * lambda * pen
}

fn newton(design: &DMatrix<f64>, labels: &[usize], m: usize, lambda: f64, start: Option<&[DVector<f64>]>) -> NewtonResult {
    let n = design.nrows();
    let p = design.ncols();
    let k = m - 1;
    let dim = k * p;
    let mut beta: Vec<DVector<f64>> = match start {
        Some(s) => s.to_vec(),
        None => vec![DVector::zeros(p); k],
    };
    let mut obj = objective(design, labels, &beta, lambda);
    let inv_n = 1.0 / n as f64;
    for it in 1..=MAX_ITERATIONS {
        let probs = class_probs(design, &beta);
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for t in 0..k {
            let resid = DVector::from_fn(n, |i, _| {
                (probs[(i, t + 1)] - if labels[i] == t + 1 { 1.0 } else { 0.0 }) * inv_n
            });
            let mut g = design.tr_mul(&resid);
            for j in 1..p {
                g[j] += lambda * beta[t][j];
            }
            grad.rows_mut(t * p, p).copy_from(&g);
            for s in t..k {
                let w = DVector::from_fn(n, |i, _| {
                    let pt = probs[(i, t + 1)];
                    let ps = probs[(i, s + 1)];
                    (if s == t { pt * (1.0 - pt) } else { -pt * ps }) * inv_n
                });
                let mut scaled = design.clone();
                for (mut row, wi) in scaled.row_iter_mut().zip(w.iter()) {
                    row *= *wi;
                }
                let block = design.tr_mul(&scaled);
                hess.view_mut((t * p, s * p), (p, p)).copy_from(&block);
                if s != t {
                    hess.view_mut((s * p, t * p), (p, p)).copy_from(&block.transpose());
                }
            }
            for j in 1..p {
                hess[(t * p + j, t * p + j)] += lambda;
            }
        }
        let step = solve_spd(hess, &grad);
        // Damped Newton: halve the step until the penalized objective drops.
        let mut scale = 1.0;
        let mut candidate;
        let mut cand_obj;
        loop {
            candidate = beta
                .iter()
                .enumerate()
                .map(|(t, b)| b - step.rows(t * p, p) * scale)
                .collect::<Vec<_>>();
            cand_obj = objective(design, labels, &candidate, lambda);
            if cand_obj <= obj + 1e-15 {
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                // No descent along the Newton direction: the likelihood is
                // flat to working precision, as under separation.
                return NewtonResult {
                    beta,
                    iterations: it,
                    converged: false,
                };
            }
        }
        let max_change = step.amax() * scale;
        beta = candidate;
        obj = cand_obj;
        if max_change < COEF_TOLERANCE {
            return NewtonResult {
                beta,
                iterations: it,
                converged: true,
            };
        }
    }
    NewtonResult {
        beta,
        iterations: MAX_ITERATIONS,
        converged: false,
    }
}

fn separated(design: &DMatrix<f64>, labels: &[usize], beta: &[DVector<f64>]) -> bool {
    let probs = class_probs(design, beta);
    labels.iter().enumerate().all(|(i, &y)| probs[(i, y)] > 1.0 - 1e-10)
}

fn solve_spd(hess: DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let dim = hess.nrows();
    let mut jitter = 0.0;
    loop {
        let mut h = hess.clone();
        for j in 0..dim {
            h[(j, j)] += jitter;
        }
        if let Some(ch) = h.cholesky() {
            return ch.solve(grad);
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > 1e6 {
            return grad.clone();
        }
    }
}

fn validate(features: ArrayView2<'_, f64>, labels: &[usize], num_actions: usize) -> Result<(), PropensityError> {
    if features.nrows() != labels.len() {
        return Err(PropensityError::InvalidInput(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(PropensityError::InvalidInput("no rows".into()));
    }
    if num_actions < 2 {
        return Err(PropensityError::InvalidInput("need at least two actions".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(PropensityError::InvalidInput("non-finite feature".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&t| t >= num_actions) {
        return Err(PropensityError::InvalidInput(format!("label {bad} out of range")));
    }
    if labels.iter().all(|&t| t == labels[0]) {
        return Err(PropensityError::DegenerateLabels);
    }
    Ok(())
}

fn to_model(std: &Standardized, fit: NewtonResult, num_actions: usize, lambda: f64) -> LogisticModel {
    let d = std.mean.len();
    let coefficients = fit
        .beta
        .iter()
        .map(|b| {
            let mut raw = vec![0.0; d + 1];
            raw[0] = b[0];
            for j in 0..d {
                raw[j + 1] = b[j + 1] / std.scale[j];
                raw[0] -= b[j + 1] * std.mean[j] / std.scale[j];
            }
            raw
        })
        .collect();
    LogisticModel {
        num_actions,
        ridge_lambda: lambda,
        coefficients,
        iterations: fit.iterations,
        converged: fit.converged,
        max_iterations_reached: !fit.converged,
        floor: POSITIVITY_FLOOR,
    }
}

/// Maximize the ridge-penalized multinomial log-likelihood by damped Newton
/// steps (IRLS for two classes). Slopes are penalized on the standardized
/// scale; the intercept is not penalized.
pub fn fit_logistic(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_actions: usize,
    ridge_lambda: f64,
) -> Result<LogisticModel, PropensityError> {
    validate(features, labels, num_actions)?;
    if !(ridge_lambda >= 0.0) {
        return Err(PropensityError::InvalidInput("ridge_lambda must be >= 0".into()));
    }
    let rows: Vec<usize> = (0..labels.len()).collect();
    let std = standardize(features, &rows);
    let mut fit = newton(&std.design, labels, num_actions, ridge_lambda, None);
    if ridge_lambda == 0.0 && fit.converged && separated(&std.design, labels, &fit.beta) {
        // The gradient vanishes only because the probabilities saturated;
        // the unpenalized optimum is at infinity.
        fit.converged = false;
    }
    Ok(to_model(&std, fit, num_actions, ridge_lambda))
}

/// Outcome of the cross-validated penalty search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: Vec<f64>,
    pub mean_log_likelihood: Vec<f64>,
    pub chosen: f64,
}

/// Choose the ridge penalty by `CV_FOLDS`-fold held-out log-likelihood over
/// [`ridge_grid`], then refit on all rows.
pub fn fit_logistic_cv(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_actions: usize,
    seed: u64,
) -> Result<(LogisticModel, CvReport), PropensityError> {
    validate(features, labels, num_actions)?;
    let lambda_report = select_ridge(features, labels, num_actions, seed)?;
    let model = fit_logistic(features, labels, num_actions, lambda_report.chosen)?;
    Ok((model, lambda_report))
}

/// Cross-validated ridge selection only (no final refit).
pub fn select_ridge(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_actions: usize,
    seed: u64,
) -> Result<CvReport, PropensityError> {
    validate(features, labels, num_actions)?;
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "cv-folds"));
    // Large to small so each fit warm-starts from a smoother solution.
    let mut grid: Vec<f64> = ridge_grid().to_vec();
    grid.reverse();
    let mut score = vec![0.0; grid.len()];
    let mut counted = 0usize;
    for fold in 0..CV_FOLDS {
        let held: Vec<usize> = order.iter().copied().skip(fold).step_by(CV_FOLDS).collect();
        let mut train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % CV_FOLDS != fold)
            .map(|(_, &i)| i)
            .collect();
        train.sort_unstable();
        let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        if held.is_empty() || train_labels.iter().all(|&t| t == train_labels[0]) {
            continue;
        }
        counted += 1;
        let std = standardize(features, &train);
        let mut warm: Option<Vec<DVector<f64>>> = None;
        for (g, &lambda) in grid.iter().enumerate() {
            let fit = newton(&std.design, &train_labels, num_actions, lambda, warm.as_deref());
            warm = Some(fit.beta.clone());
            let model = to_model(&std, fit, num_actions, lambda);
            let mut buf = vec![0.0; num_actions];
            let mut ll = 0.0;
            for &i in &held {
                let x: Vec<f64> = features.row(i).to_vec();
                model.probabilities_into(&x, &mut buf);
                ll += buf[labels[i]].ln();
            }
            score[g] += ll / held.len() as f64;
        }
    }
    if counted == 0 {
        return Err(PropensityError::DegenerateLabels);
    }
    for s in &mut score {
        *s /= counted as f64;
    }
    // Ties favour the larger penalty (earlier in the descending grid).
    let mut best = 0;
    for g in 1..grid.len() {
        if score[g] > score[best] {
            best = g;
        }
    }
    Ok(CvReport {
        chosen: grid[best],
        grid,
        mean_log_likelihood: score,
    })
}

/// Fit with the requested penalty rule.
pub fn fit_with_penalty(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    num_actions: usize,
    penalty: Penalty,
    seed: u64,
) -> Result<LogisticModel, PropensityError> {
    match penalty {
        Penalty::None => fit_logistic(features, labels, num_actions, 0.0),
        Penalty::Ridge(l) => fit_logistic(features, labels, num_actions, l),
        Penalty::RidgeCv => fit_logistic_cv(features, labels, num_actions, seed).map(|(m, _)| m),
    }
}

/// The pseudo policy: `pi_a(t|x)` proportional to `pi_e(t|x) / pi_b(t|x)`.
pub struct PseudoPolicy {
    target: SharedPolicy,
    behavior: SharedPolicy,
    floor: f64,
}

impl PseudoPolicy {
    pub fn new(target: SharedPolicy, behavior: SharedPolicy) -> Result<Self, PropensityError> {
        if target.num_actions() != behavior.num_actions() {
            return Err(PropensityError::ActionCountMismatch {
                target: target.num_actions(),
                behavior: behavior.num_actions(),
            });
        }
        Ok(Self {
            target,
            behavior,
            floor: POSITIVITY_FLOOR,
        })
    }

    pub fn target(&self) -> &SharedPolicy {
        &self.target
    }

    pub fn behavior(&self) -> &SharedPolicy {
        &self.behavior
    }

    /// Unnormalized ratios `pi_e(t|x) / pi_b(t|x)`; returns their sum.
    fn ratios_into(&self, context: &[f64], out: &mut [f64]) -> f64 {
        let m = out.len();
        let mut tgt = vec![0.0; m];
        let mut beh = vec![0.0; m];
        self.target.probabilities_into(context, &mut tgt);
        self.behavior.probabilities_into(context, &mut beh);
        let mut total = 0.0;
        for t in 0..m {
            out[t] = tgt[t] / beh[t].clamp(self.floor, 1.0 - self.floor);
            total += out[t];
        }
        total
    }

    /// `sum_t pi_e(t|x) / pi_b(t|x)`, i.e. `1 / P(A = T | x)`.
    pub fn weight(&self, context: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.num_actions()];
        self.ratios_into(context, &mut buf)
    }

    /// `P(A = T | x) = sum_t pi_a(t|x) pi_b(t|x)`.
    pub fn match_probability(&self, context: &[f64]) -> f64 {
        1.0 / self.weight(context)
    }
}

impl Policy for PseudoPolicy {
    fn num_actions(&self) -> usize {
        self.target.num_actions()
    }

    fn kind(&self) -> PolicyKind {
        PolicyKind::Pseudo
    }

    fn probabilities_into(&self, context: &[f64], out: &mut [f64]) {
        let total = self.ratios_into(context, out);
        for v in out.iter_mut() {
            *v /= total;
        }
    }
}

pub fn make_pseudo_policy(target: SharedPolicy, behavior: SharedPolicy) -> Result<PseudoPolicy, PropensityError> {
    PseudoPolicy::new(target, behavior)
}

/// Draw one action per row from `policy`. Exactly one uniform is consumed
/// per row, whatever the policy, so streams stay aligned across policies.
pub fn sample_actions(policy: &dyn Policy, contexts: ArrayView2<'_, f64>, rng: &mut StreamRng) -> Vec<usize> {
    let m = policy.num_actions();
    let mut probs = vec![0.0; m];
    let mut row = Vec::with_capacity(contexts.ncols());
    contexts
        .outer_iter()
        .map(|x| {
            row.clear();
            row.extend(x.iter().copied());
            policy.probabilities_into(&row, &mut probs);
            draw(&probs, rng.random::<f64>())
        })
        .collect()
}

/// Inverse-CDF draw from a mass vector.
pub fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (t, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return t;
        }
    }
    // Round-off: fall back to the last action carrying mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Indices where the pseudo action equals the logged action.
pub fn select_matched(actions: &[usize], pseudo_actions: &[usize]) -> Vec<usize> {
    actions
        .iter()
        .zip(pseudo_actions)
        .enumerate()
        .filter(|(_, (a, p))| a == p)
        .map(|(i, _)| i)
        .collect()
}

/// Theoretical arm mixture among matched samples at one context when
/// pseudo actions are drawn from `sampler`:
/// `pi_s(t|x) pi_b(t|x) / sum_t' pi_s(t'|x) pi_b(t'|x)`.
pub fn matched_mixture_weights(sampler: &dyn Policy, behavior: &dyn Policy, context: &[f64]) -> Vec<f64> {
    let s = sampler.probabilities(context);
    let b = behavior.probabilities(context);
    let prod: Vec<f64> = s.iter().zip(&b).map(|(x, y)| x * y).collect();
    let total: f64 = prod.iter().sum();
    prod.into_iter().map(|v| v / total).collect()
}

/// Empirical arm shares among matched rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureCheck {
    pub matched: usize,
    pub shares: Vec<f64>,
}

pub fn matched_arm_shares(actions: &[usize], pseudo_actions: &[usize], num_actions: usize) -> MixtureCheck {
    let mut counts = vec![0usize; num_actions];
    for (a, p) in actions.iter().zip(pseudo_actions) {
        if a == p {
            counts[*a] += 1;
        }
    }
    let matched: usize = counts.iter().sum();
    let shares = counts
        .iter()
        .map(|&c| if matched == 0 { 0.0 } else { c as f64 / matched as f64 })
        .collect();
    MixtureCheck { matched, shares }
}

/// Monte Carlo at a fixed context stratum: draw `T ~ behavior` and a pseudo
/// action from `sampler` `draws` times and report arm shares among matches.
pub fn simulate_matched_mixture(
    sampler: &dyn Policy,
    behavior: &dyn Policy,
    context: &[f64],
    draws: usize,
    rng: &mut StreamRng,
) -> MixtureCheck {
    let s = sampler.probabilities(context);
    let b = behavior.probabilities(context);
    let mut actions = Vec::with_capacity(draws);
    let mut pseudo = Vec::with_capacity(draws);
    for _ in 0..draws {
        actions.push(draw(&b, rng.random::<f64>()));
        pseudo.push(draw(&s, rng.random::<f64>()));
    }
    matched_arm_shares(&actions, &pseudo, sampler.num_actions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sigmoid, AnalyticPolicy, DeterministicPolicy, UniformPolicy};
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand_distr::{Distribution, Uniform};

    fn constant(p1: f64) -> SharedPolicy {
        AnalyticPolicy::binary(move |_| p1).shared()
    }

    #[test]
    fn intercept_only_balanced() {
        let x = Array2::<f64>::zeros((10, 0));
        let y = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let m = fit_logistic(x.view(), &y, 2, 0.0).unwrap();
        assert!(m.converged);
        assert_abs_diff_eq!(m.probabilities(&[])[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let x = Array2::<f64>::zeros((3, 1));
        assert!(matches!(fit_logistic(x.view(), &[1, 1, 1], 2, 0.0), Err(PropensityError::DegenerateLabels)));
        let mut bad = Array2::<f64>::zeros((3, 1));
        bad[[1, 0]] = f64::NAN;
        assert!(matches!(fit_logistic(bad.view(), &[0, 1, 1], 2, 0.0), Err(PropensityError::InvalidInput(_))));
    }

    #[test]
    fn separable_data_hits_iteration_cap() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
        let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let m = fit_logistic(x.view(), &y, 2, 0.0).unwrap();
        assert!(m.max_iterations_reached);
        assert!(!m.converged);
    }

    #[test]
    fn heavy_ridge_flattens_slopes() {
        let mut rng = stream(1, 0, "t");
        let u = Uniform::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((400, 3), |_| u.sample(&mut rng));
        let y: Vec<usize> = (0..400)
            .map(|i| usize::from(rng.random::<f64>() < sigmoid(2.0 * x[[i, 0]] - 1.0)))
            .collect();
        let m = fit_logistic(x.view(), &y, 2, 1e8).unwrap();
        assert!(m.coefficients[0][1..].iter().all(|b| b.abs() < 1e-6));
    }

    #[test]
    fn converged_fit_has_small_gradient() {
        let mut rng = stream(2, 0, "t");
        let u = Uniform::new(0.0, 1.0).unwrap();
        let n = 2000;
        let x = Array2::from_shape_fn((n, 2), |_| u.sample(&mut rng));
        let y: Vec<usize> = (0..n)
            .map(|i| usize::from(rng.random::<f64>() < sigmoid(1.0 - 2.0 * x[[i, 1]])))
            .collect();
        let m = fit_logistic(x.view(), &y, 2, 0.0).unwrap();
        assert!(m.converged);
        let mut grad = [0.0; 3];
        for i in 0..n {
            let row = [x[[i, 0]], x[[i, 1]]];
            let mut p = [0.0; 2];
            m.raw_probabilities_into(&row, &mut p);
            let r = (p[1] - y[i] as f64) / n as f64;
            grad[0] += r;
            grad[1] += r * row[0];
            grad[2] += r * row[1];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn multinomial_recovers_three_class_rates() {
        let mut rng = stream(3, 0, "t");
        let n = 6000;
        let x = Array2::<f64>::zeros((n, 0));
        let y: Vec<usize> = (0..n).map(|_| draw(&[0.2, 0.3, 0.5], rng.random())).collect();
        let m = fit_logistic(x.view(), &y, 3, 0.0).unwrap();
        let p = m.probabilities(&[]);
        let emp: Vec<f64> = (0..3).map(|t| y.iter().filter(|&&v| v == t).count() as f64 / n as f64).collect();
        for t in 0..3 {
            assert_abs_diff_eq!(p[t], emp[t], epsilon = 1e-8);
        }
        let back = LogisticModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn cv_picks_a_grid_value() {
        let mut rng = stream(4, 0, "t");
        let u = Uniform::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((300, 5), |_| u.sample(&mut rng));
        let y: Vec<usize> = (0..300)
            .map(|i| usize::from(rng.random::<f64>() < sigmoid(x[[i, 0]] - 0.5)))
            .collect();
        let (model, report) = fit_logistic_cv(x.view(), &y, 2, 9).unwrap();
        assert!(ridge_grid().contains(&report.chosen));
        assert_eq!(model.ridge_lambda, report.chosen);
    }

    #[test]
    fn pseudo_policy_examples() {
        // Uniform behavior leaves the target unchanged.
        let tgt = constant(0.8);
        let a = PseudoPolicy::new(tgt.clone(), std::sync::Arc::new(UniformPolicy { num_actions: 2 })).unwrap();
        assert_abs_diff_eq!(a.probabilities(&[])[1], 0.8, epsilon = 1e-12);
        // Deterministic target is a fixed point.
        let det = DeterministicPolicy::new(2, |_| 1).shared();
        let a = PseudoPolicy::new(det, constant(0.25)).unwrap();
        assert_eq!(a.probabilities(&[])[1], 1.0);
        // (0.8 / 0.25) / (0.2 / 0.75) = 12, so pi_a(1) = 12 / 13.
        let a = PseudoPolicy::new(tgt, constant(0.25)).unwrap();
        assert_abs_diff_eq!(a.probabilities(&[])[1], 12.0 / 13.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.weight(&[]), 0.8 / 0.25 + 0.2 / 0.75, epsilon = 1e-12);
    }

    #[test]
    fn pseudo_sampling_and_matching() {
        let det = DeterministicPolicy::new(2, |_| 1).shared();
        let a = PseudoPolicy::new(det, constant(0.4)).unwrap();
        let x = Array2::<f64>::zeros((50, 1));
        let s = sample_actions(&a, x.view(), &mut stream(5, 0, "p"));
        assert!(s.iter().all(|&v| v == 1));

        let half = PseudoPolicy::new(constant(0.5), std::sync::Arc::new(UniformPolicy { num_actions: 2 })).unwrap();
        let x = Array2::<f64>::zeros((100_000, 1));
        let s1 = sample_actions(&half, x.view(), &mut stream(6, 0, "p"));
        let s2 = sample_actions(&half, x.view(), &mut stream(6, 0, "p"));
        assert_eq!(s1, s2);
        let mean = s1.iter().sum::<usize>() as f64 / s1.len() as f64;
        assert!((0.494..=0.506).contains(&mean), "mean {mean}");

        let t = vec![0, 1, 1, 0];
        assert_eq!(select_matched(&t, &t), vec![0, 1, 2, 3]);
        let flipped: Vec<usize> = t.iter().map(|v| 1 - v).collect();
        assert!(select_matched(&t, &flipped).is_empty());
    }

    #[test]
    fn matched_mixture_under_pseudo_and_target_sampling() {
        let tgt = constant(0.8);
        let beh = constant(0.25);
        let pseudo = PseudoPolicy::new(tgt.clone(), beh.clone()).unwrap();
        let theory = matched_mixture_weights(&pseudo, beh.as_ref(), &[]);
        assert_abs_diff_eq!(theory[1], 0.8, epsilon = 1e-12);
        let mc = simulate_matched_mixture(&pseudo, beh.as_ref(), &[], 100_000, &mut stream(8, 0, "mc"));
        let se = (0.8 * 0.2 / mc.matched as f64).sqrt();
        assert!((mc.shares[1] - 0.8).abs() < 3.0 * se);
        // Deterministic target: every match is on the chosen arm.
        let det = DeterministicPolicy::new(2, |_| 0).shared();
        let mc = simulate_matched_mixture(det.as_ref(), beh.as_ref(), &[], 1000, &mut stream(9, 0, "mc"));
        assert_eq!(mc.shares[0], 1.0);
    }
}
