//! Stochastic decision rules over a finite action set.

use std::sync::Arc;

/// Probabilities below this floor are lifted to it before any ratio is
/// formed, so importance ratios stay finite.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

/// Logistic function, stable for large `|t|`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Analytic,
    FittedLogistic,
    Pseudo,
    Deterministic,
}

/// A probability mass function over `0..num_actions()` given a context (or a
/// flattened history).
pub trait Policy: Send + Sync {
    fn num_actions(&self) -> usize;

    fn kind(&self) -> PolicyKind;

    /// Write the action probabilities for `context` into `out`
    /// (`out.len() == num_actions()`).
    fn probabilities_into(&self, context: &[f64], out: &mut [f64]);

    fn probabilities(&self, context: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions()];
        self.probabilities_into(context, &mut out);
        out
    }

    fn probability(&self, context: &[f64], action: usize) -> f64 {
        self.probabilities(context)[action]
    }
}

pub type SharedPolicy = Arc<dyn Policy>;

/// Clip masses into `[floor, 1 - floor]` and renormalize.
pub fn clip_probabilities(p: &mut [f64], floor: f64) {
    let mut total = 0.0;
    for v in p.iter_mut() {
        *v = v.clamp(floor, 1.0 - floor);
        total += *v;
    }
    for v in p.iter_mut() {
        *v /= total;
    }
}

type MassFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A policy given by a closed-form mass function.
pub struct AnalyticPolicy {
    num_actions: usize,
    mass: Box<MassFn>,
}

impl AnalyticPolicy {
    pub fn new(num_actions: usize, mass: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            num_actions,
            mass: Box::new(mass),
        }
    }

    /// Two-action policy with `P(T = 1 | x) = p1(x)`.
    pub fn binary(p1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(2, move |x, out| {
            let p = p1(x);
            out[0] = 1.0 - p;
            out[1] = p;
        })
    }

    pub fn shared(self) -> SharedPolicy {
        Arc::new(self)
    }
}

impl Policy for AnalyticPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn kind(&self) -> PolicyKind {
        PolicyKind::Analytic
    }

    fn probabilities_into(&self, context: &[f64], out: &mut [f64]) {
        (self.mass)(context, out)
    }
}

/// A policy that always picks `rule(x)`.
pub struct DeterministicPolicy {
    num_actions: usize,
    rule: Box<dyn Fn(&[f64]) -> usize + Send + Sync>,
}

impl DeterministicPolicy {
    pub fn new(num_actions: usize, rule: impl Fn(&[f64]) -> usize + Send + Sync + 'static) -> Self {
        Self {
            num_actions,
            rule: Box::new(rule),
        }
    }

    pub fn action(&self, context: &[f64]) -> usize {
        (self.rule)(context)
    }

    pub fn shared(self) -> SharedPolicy {
        Arc::new(self)
    }
}

impl Policy for DeterministicPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn kind(&self) -> PolicyKind {
        PolicyKind::Deterministic
    }

    fn probabilities_into(&self, context: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[(self.rule)(context)] = 1.0;
    }
}

/// Uniformly random over all actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl Policy for UniformPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn kind(&self) -> PolicyKind {
        PolicyKind::Analytic
    }

    fn probabilities_into(&self, _context: &[f64], out: &mut [f64]) {
        out.fill(1.0 / self.num_actions as f64);
    }
}
