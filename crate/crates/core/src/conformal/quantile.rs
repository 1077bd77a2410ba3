//! Conformity scores and weighted quantiles with a point mass at infinity.

use serde::{Deserialize, Serialize};

use super::ConformalError;

/// Relative slack on cumulative-mass comparisons, absorbing summation
/// round-off. Part of the quantile convention.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Conformalized quantile regression score `max(q_lo - y, y - q_hi)`.
pub fn cqr_score(y: f64, q_lo: f64, q_hi: f64) -> Result<f64, ConformalError> {
    if q_lo > q_hi {
        return Err(ConformalError::InvalidInput(format!("q_lo {q_lo} exceeds q_hi {q_hi}")));
    }
    Ok(score(y, q_lo, q_hi))
}

#[inline]
pub(crate) fn score(y: f64, q_lo: f64, q_hi: f64) -> f64 {
    (q_lo - y).max(y - q_hi)
}

/// Calibration scores with nonnegative weights plus the test point's weight,
/// which sits on `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedScoreSet {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub test_weight: f64,
}

impl WeightedScoreSet {
    pub fn new(scores: Vec<f64>, weights: Vec<f64>, test_weight: f64) -> Result<Self, ConformalError> {
        if scores.len() != weights.len() {
            return Err(ConformalError::InvalidInput(format!(
                "{} scores but {} weights",
                scores.len(),
                weights.len()
            )));
        }
        if weights.iter().chain([&test_weight]).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ConformalError::InvalidInput("weights must be finite and nonnegative".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(ConformalError::InvalidInput("NaN score".into()));
        }
        if weights.iter().sum::<f64>() + test_weight <= 0.0 {
            return Err(ConformalError::InvalidInput("all weights are zero".into()));
        }
        Ok(Self {
            scores,
            weights,
            test_weight,
        })
    }

    /// Smallest score whose normalized cumulative mass reaches `level`;
    /// `+inf` if only the point mass at infinity gets there.
    pub fn weighted_quantile(&self, level: f64) -> f64 {
        CalibratedScores::new(&self.scores, &self.weights).quantile(level, self.test_weight)
    }
}

/// Calibration scores sorted once, so quantiles for many test weights cost a
/// binary search each.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibratedScores {
    sorted: Vec<f64>,
    /// `prefix[k]` is the weight of `sorted[..=k]`.
    prefix: Vec<f64>,
    total: f64,
    sum_sq: f64,
}

impl CalibratedScores {
    pub fn new(scores: &[f64], weights: &[f64]) -> Self {
        let mut pairs: Vec<(f64, f64)> = scores.iter().copied().zip(weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let mut prefix = Vec::with_capacity(pairs.len());
        for &(_, w) in &pairs {
            acc += w;
            prefix.push(acc);
        }
        Self {
            sorted: pairs.iter().map(|p| p.0).collect(),
            prefix,
            total: acc,
            sum_sq: weights.iter().map(|w| w * w).sum(),
        }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.total
    }

    pub fn scores(&self) -> &[f64] {
        &self.sorted
    }

    /// Kish effective sample size `(sum w)^2 / sum w^2` of the calibration
    /// weights, i.e. `1 / sum p_i^2` with `p` normalized over calibration
    /// points.
    pub fn effective_sample_size(&self) -> f64 {
        if self.sum_sq == 0.0 {
            0.0
        } else {
            self.total * self.total / self.sum_sq
        }
    }

    /// Weighted `level`-quantile of `sum_i p_i delta_{S_i} + p_inf delta_inf`
    /// where the test point carries `test_weight`.
    pub fn quantile(&self, level: f64, test_weight: f64) -> f64 {
        let total = self.total + test_weight;
        if !(total > 0.0) {
            return f64::INFINITY;
        }
        let target = level * total - MASS_TOLERANCE * total;
        let k = self.prefix.partition_point(|&c| c < target);
        self.sorted.get(k).copied().unwrap_or(f64::INFINITY)
    }

    /// Normalized mass on calibration scores `>= s` plus the test mass.
    pub fn p_value(&self, s: f64, test_weight: f64) -> f64 {
        let total = self.total + test_weight;
        let k = self.sorted.partition_point(|&v| v < s);
        let below = if k == 0 { 0.0 } else { self.prefix[k - 1] };
        ((self.total - below).max(0.0) + test_weight) / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    /// Exhaustive oracle: try every candidate score in input order and keep
    /// the smallest whose (unsorted) cumulative mass reaches the level.
    fn brute(set: &WeightedScoreSet, level: f64) -> f64 {
        let total: f64 = set.weights.iter().sum::<f64>() + set.test_weight;
        let mut best = f64::INFINITY;
        for &cand in &set.scores {
            let mass: f64 = set
                .scores
                .iter()
                .zip(&set.weights)
                .filter(|(s, _)| **s <= cand)
                .map(|(_, w)| w)
                .sum();
            if mass >= level * total - MASS_TOLERANCE * total && cand < best {
                best = cand;
            }
        }
        best
    }

    #[test]
    fn score_examples() {
        assert_eq!(cqr_score(1.0, 1.0, 3.0).unwrap(), 0.0);
        assert_eq!(cqr_score(2.0, 1.0, 3.0).unwrap(), -1.0);
        assert_eq!(cqr_score(5.0, 1.0, 3.0).unwrap(), 2.0);
        assert!(cqr_score(0.0, 3.0, 1.0).is_err());
    }

    #[test]
    fn quantile_examples() {
        let all_inf = WeightedScoreSet::new(vec![], vec![], 1.0).unwrap();
        assert_eq!(all_inf.weighted_quantile(0.1), f64::INFINITY);
        let s = WeightedScoreSet::new(vec![4.0, 2.0, 1.0, 3.0], vec![1.0; 4], 1.0).unwrap();
        assert_eq!(s.weighted_quantile(0.5), 3.0);
        assert!(WeightedScoreSet::new(vec![1.0], vec![0.0], 0.0).is_err());
        assert!(WeightedScoreSet::new(vec![1.0], vec![-1.0], 1.0).is_err());
    }

    #[test]
    fn oracle_equivalence_on_random_sets() {
        let mut rng = stream(11, 0, "wq");
        for case in 0..1000 {
            let n = rng.random_range(0..=50);
            // Ties and zero weights are deliberately common.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-20..20) as f64) * 0.5).collect();
            let weights: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() * 3.0 })
                .collect();
            let test_weight = if n > 0 && rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() * 3.0 + 1e-3 };
            let Ok(set) = WeightedScoreSet::new(scores, weights, test_weight) else { continue };
            let level = rng.random::<f64>();
            assert_eq!(set.weighted_quantile(level), brute(&set, level), "case {case}");
        }
    }

    #[test]
    fn unweighted_matches_order_statistic() {
        let mut rng = stream(12, 0, "wq");
        for _ in 0..1000 {
            let n = rng.random_range(1..=40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let level = rng.random::<f64>();
            let set = WeightedScoreSet::new(scores.clone(), vec![1.0; n], 0.0).unwrap();
            let mut sorted = scores;
            sorted.sort_by(f64::total_cmp);
            // inf{s : #{S_i <= s} / n >= level} is the ceil(n level)-th order statistic.
            let k = ((level * n as f64).ceil() as usize).max(1);
            assert_eq!(set.weighted_quantile(level), sorted[k - 1]);
        }
    }

    proptest! {
        #[test]
        fn rescaling_invariance(
            raw in proptest::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 0..30),
            tw in 0.01f64..5.0,
            c in prop_oneof![Just(2.0f64), Just(0.5f64), Just(4.0f64), Just(0.125f64)],
            level in 0.0f64..1.0,
        ) {
            let (s, w): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
            let a = WeightedScoreSet::new(s.clone(), w.clone(), tw).unwrap();
            let b = WeightedScoreSet::new(s, w.iter().map(|v| v * c).collect(), tw * c).unwrap();
            prop_assert_eq!(a.weighted_quantile(level), b.weighted_quantile(level));
        }

        #[test]
        fn quantile_monotone_in_level(
            raw in proptest::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 1..30),
            tw in 0.0f64..5.0,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (s, w): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
            let cal = CalibratedScores::new(&s, &w);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cal.quantile(lo, tw) <= cal.quantile(hi, tw));
        }
    }
}
