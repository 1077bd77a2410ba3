//! Quantile regression forest.
//!
//! Trees are grown by squared-error CART on bootstrap resamples with random
//! feature subsets at each split. Each leaf keeps the (in-bag) training
//! samples that reached it, so a query point induces Meinshausen weights
//! `w_i(x) = (1/T) sum_trees count_i(leaf) / |leaf|` over training outcomes.
//! Conditional quantiles and means are read off that weighted empirical
//! distribution.
//!
//! Split search runs over per-feature histograms: each feature is cut into at
//! most `max_bins` bins whose edges are midpoints between distinct training
//! values, so with few distinct values the search is exact CART.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ndarray::ArrayView2;

use crate::rng::{derive_seed, purpose, substream};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("forest has not been fitted")]
    NotFitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub num_trees: usize,
    pub min_leaf_size: usize,
    /// Features tried per split; `None` means `ceil(d / 3)`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub max_bins: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            num_trees: 200,
            min_leaf_size: 5,
            max_features: None,
            bootstrap: true,
            max_bins: 64,
        }
    }
}

impl ForestConfig {
    pub fn with_trees(mut self, num_trees: usize) -> Self {
        self.num_trees = num_trees;
        self
    }

    fn features_per_split(&self, d: usize) -> usize {
        match self.max_features {
            Some(k) => k.clamp(1, d.max(1)).min(d),
            None => d.div_ceil(3).min(d),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    /// Range into the tree's `leaf_ranks`.
    Leaf { start: u32, len: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
    /// Outcome ranks of in-bag samples, grouped by leaf, with multiplicity.
    leaf_ranks: Vec<u32>,
}

impl Tree {
    /// `(start, len)` of the leaf reached by `x`.
    fn leaf_range(&self, x: &[f64]) -> (usize, usize) {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { start, len } => return (*start as usize, *len as usize),
            }
        }
    }

    fn leaf(&self, x: &[f64]) -> &[u32] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { start, len } => {
                    return &self.leaf_ranks[*start as usize..(*start + *len) as usize];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileForest {
    config: ForestConfig,
    dim: usize,
    trees: Vec<Tree>,
    /// Training outcomes in ascending order; leaves refer to positions here.
    sorted_outcomes: Vec<f64>,
    /// `rank_of[i]` is the position of training sample `i` in `sorted_outcomes`.
    rank_of: Vec<u32>,
}

struct Binned {
    n: usize,
    codes: Vec<u8>,
    edges: Vec<Vec<f64>>,
}

impl Binned {
    fn new(features: ArrayView2<'_, f64>, max_bins: usize) -> Self {
        let (n, d) = features.dim();
        let max_bins = max_bins.clamp(2, 256);
        let mut codes = vec![0u8; n * d];
        let mut edges = Vec::with_capacity(d);
        for j in 0..d {
            let mut vals: Vec<f64> = features.column(j).to_vec();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let cuts: Vec<f64> = if vals.len() <= max_bins {
                vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            } else {
                let mut c: Vec<f64> = (1..max_bins)
                    .map(|b| {
                        let k = (b * vals.len() / max_bins).clamp(1, vals.len() - 1);
                        0.5 * (vals[k - 1] + vals[k])
                    })
                    .collect();
                c.dedup();
                c
            };
            for (i, v) in features.column(j).iter().enumerate() {
                codes[j * n + i] = cuts.partition_point(|e| e < v) as u8;
            }
            edges.push(cuts);
        }
        Self { n, codes, edges }
    }

    fn code(&self, feature: usize, sample: u32) -> usize {
        self.codes[feature * self.n + sample as usize] as usize
    }
}

struct Grower<'a> {
    binned: &'a Binned,
    outcomes: &'a [f64],
    rank_of: &'a [u32],
    config: &'a ForestConfig,
    mtry: usize,
}

struct BestSplit {
    feature: usize,
    bin: usize,
}

impl Grower<'_> {
    fn grow(&self, seed: u64) -> Tree {
        let mut rng = substream(seed, purpose::FOREST);
        let n = self.binned.n;
        let mut samples: Vec<u32> = if self.config.bootstrap {
            (0..n).map(|_| rng.random_range(0..n) as u32).collect()
        } else {
            (0..n as u32).collect()
        };
        let mut nodes = Vec::new();
        let mut leaf_ranks = Vec::with_capacity(samples.len());
        let d = self.binned.edges.len();
        let max_bins = self.binned.edges.iter().map(|e| e.len() + 1).max().unwrap_or(1);
        let mut counts = vec![0usize; max_bins];
        let mut sums = vec![0.0f64; max_bins];

        // (node id, start, end) over `samples`.
        nodes.push(Node::Leaf { start: 0, len: 0 });
        let mut stack = vec![(0usize, 0usize, samples.len())];
        while let Some((id, lo, hi)) = stack.pop() {
            let split = if hi - lo >= 2 * self.config.min_leaf_size && self.mtry > 0 {
                let feats = sample_indices(&mut rng, d, self.mtry);
                self.best_split(&samples[lo..hi], feats.iter(), &mut counts, &mut sums)
            } else {
                None
            };
            match split {
                Some(BestSplit { feature, bin }) => {
                    let part = &mut samples[lo..hi];
                    let mut mid = 0;
                    for k in 0..part.len() {
                        if self.binned.code(feature, part[k]) <= bin {
                            part.swap(k, mid);
                            mid += 1;
                        }
                    }
                    let left = nodes.len();
                    nodes.push(Node::Leaf { start: 0, len: 0 });
                    nodes.push(Node::Leaf { start: 0, len: 0 });
                    nodes[id] = Node::Split {
                        feature: feature as u32,
                        threshold: self.binned.edges[feature][bin],
                        left: left as u32,
                        right: left as u32 + 1,
                    };
                    stack.push((left + 1, lo + mid, hi));
                    stack.push((left, lo, lo + mid));
                }
                None => {
                    let start = leaf_ranks.len();
                    leaf_ranks.extend(samples[lo..hi].iter().map(|&i| self.rank_of[i as usize]));
                    nodes[id] = Node::Leaf {
                        start: start as u32,
                        len: (hi - lo) as u32,
                    };
                }
            }
        }
        Tree { nodes, leaf_ranks }
    }

    fn best_split(
        &self,
        node: &[u32],
        features: impl Iterator<Item = usize>,
        counts: &mut [usize],
        sums: &mut [f64],
    ) -> Option<BestSplit> {
        let total_n = node.len();
        let total_s: f64 = node.iter().map(|&i| self.outcomes[i as usize]).sum();
        let first = self.outcomes[node[0] as usize];
        if node.iter().all(|&i| self.outcomes[i as usize] == first) {
            return None;
        }
        let min_leaf = self.config.min_leaf_size.max(1);
        let base = total_s * total_s / total_n as f64;
        let mut best: Option<(f64, BestSplit)> = None;
        for feature in features {
            let bins = self.binned.edges[feature].len() + 1;
            if bins < 2 {
                continue;
            }
            counts[..bins].fill(0);
            sums[..bins].fill(0.0);
            for &i in node {
                let b = self.binned.code(feature, i);
                counts[b] += 1;
                sums[b] += self.outcomes[i as usize];
            }
            let (mut nl, mut sl) = (0usize, 0.0f64);
            for b in 0..bins - 1 {
                nl += counts[b];
                sl += sums[b];
                if counts[b] == 0 || nl < min_leaf {
                    continue;
                }
                let nr = total_n - nl;
                if nr < min_leaf {
                    break;
                }
                let sr = total_s - sl;
                let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - base;
                if gain > 1e-12 * (1.0 + base.abs()) && best.as_ref().is_none_or(|(g, _)| gain > *g) {
                    best = Some((gain, BestSplit { feature, bin: b }));
                }
            }
        }
        best.map(|(_, s)| s)
    }
}

impl QuantileForest {
    /// An unfitted forest; predictions fail until [`QuantileForest::fit`].
    pub fn new(config: ForestConfig) -> Self {
        Self {
            config,
            dim: 0,
            trees: Vec::new(),
            sorted_outcomes: Vec::new(),
            rank_of: Vec::new(),
        }
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn is_fitted(&self) -> bool {
        !self.trees.is_empty()
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn num_training(&self) -> usize {
        self.rank_of.len()
    }

    pub fn fit(&mut self, features: ArrayView2<'_, f64>, outcomes: &[f64], seed: u64) -> Result<(), ForestError> {
        let (n, d) = features.dim();
        let cfg = self.config;
        if outcomes.len() != n {
            return Err(ForestError::InvalidInput(format!("{n} feature rows but {} outcomes", outcomes.len())));
        }
        if cfg.num_trees == 0 || cfg.min_leaf_size == 0 {
            return Err(ForestError::InvalidInput("num_trees and min_leaf_size must be positive".into()));
        }
        if n < 2 * cfg.min_leaf_size {
            return Err(ForestError::InvalidInput(format!(
                "{n} rows; need at least {}",
                2 * cfg.min_leaf_size
            )));
        }
        if features.iter().chain(outcomes).any(|v| !v.is_finite()) {
            return Err(ForestError::InvalidInput("non-finite value".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| outcomes[a].total_cmp(&outcomes[b]));
        let mut rank_of = vec![0u32; n];
        for (r, &i) in order.iter().enumerate() {
            rank_of[i] = r as u32;
        }
        let sorted_outcomes: Vec<f64> = order.iter().map(|&i| outcomes[i]).collect();
        let binned = Binned::new(features, cfg.max_bins);
        let grower = Grower {
            binned: &binned,
            outcomes,
            rank_of: &rank_of,
            config: &cfg,
            mtry: cfg.features_per_split(d),
        };
        let trees: Vec<Tree> = (0..cfg.num_trees)
            .into_par_iter()
            .map(|t| grower.grow(derive_seed(seed, t as u64, purpose::FOREST)))
            .collect();
        self.dim = d;
        self.trees = trees;
        self.sorted_outcomes = sorted_outcomes;
        self.rank_of = rank_of;
        Ok(())
    }

    fn check(&self, x: &[f64]) -> Result<(), ForestError> {
        if !self.is_fitted() {
            return Err(ForestError::NotFitted);
        }
        if x.len() != self.dim {
            return Err(ForestError::InvalidInput(format!("context has {} features, expected {}", x.len(), self.dim)));
        }
        Ok(())
    }

    /// Weight mass per outcome rank; `buf.len()` becomes the training size.
    fn rank_weights(&self, x: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.resize(self.sorted_outcomes.len(), 0.0);
        let per_tree = 1.0 / self.trees.len() as f64;
        for tree in &self.trees {
            let leaf = tree.leaf(x);
            let w = per_tree / leaf.len() as f64;
            for &r in leaf {
                buf[r as usize] += w;
            }
        }
    }

    /// Meinshausen weights indexed by training sample.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<f64>, ForestError> {
        self.check(x)?;
        let mut by_rank = Vec::new();
        self.rank_weights(x, &mut by_rank);
        Ok(self.rank_of.iter().map(|&r| by_rank[r as usize]).collect())
    }

    /// For each tree, the training samples (with bootstrap multiplicity) in
    /// the leaf reached by `x`.
    pub fn leaf_members(&self, x: &[f64]) -> Result<Vec<Vec<usize>>, ForestError> {
        self.check(x)?;
        let mut sample_at = vec![0usize; self.rank_of.len()];
        for (i, &r) in self.rank_of.iter().enumerate() {
            sample_at[r as usize] = i;
        }
        Ok(self
            .trees
            .iter()
            .map(|t| t.leaf(x).iter().map(|&r| sample_at[r as usize]).collect())
            .collect())
    }

    fn quantiles_from(&self, by_rank: &[f64], levels: &[f64], out: &mut [f64]) {
        // Left-continuous inverse: first outcome whose cumulative weight
        // reaches the level (up to summation round-off).
        let tol = 1e-12 * self.trees.len() as f64;
        let mut order: Vec<usize> = (0..levels.len()).collect();
        order.sort_by(|&a, &b| levels[a].total_cmp(&levels[b]));
        let mut cum = 0.0;
        let mut r = 0usize;
        let last = by_rank.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for &k in &order {
            while r < last && cum + by_rank[r] < levels[k] - tol {
                cum += by_rank[r];
                r += 1;
            }
            // Skip zero-mass ranks so the answer is a support point.
            while r < last && by_rank[r] == 0.0 {
                r += 1;
            }
            out[k] = self.sorted_outcomes[r];
        }
    }

    /// Conditional quantiles at arbitrary levels in `[0, 1]`.
    pub fn predict_levels(&self, x: &[f64], levels: &[f64]) -> Result<Vec<f64>, ForestError> {
        self.check(x)?;
        if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(ForestError::InvalidInput("levels must lie in [0, 1]".into()));
        }
        let mut by_rank = Vec::new();
        self.rank_weights(x, &mut by_rank);
        let mut out = vec![0.0; levels.len()];
        self.quantiles_from(&by_rank, levels, &mut out);
        Ok(out)
    }

    /// `(q_lo(x), q_hi(x))`; the pair is ordered by construction.
    pub fn predict_quantiles(&self, x: &[f64], levels: (f64, f64)) -> Result<(f64, f64), ForestError> {
        check_levels(levels)?;
        let q = self.predict_levels(x, &[levels.0, levels.1])?;
        Ok((q[0], q[1]))
    }

    /// Quantile pairs for every row of `contexts`.
    pub fn predict_quantiles_batch(
        &self,
        contexts: ArrayView2<'_, f64>,
        levels: (f64, f64),
    ) -> Result<Vec<(f64, f64)>, ForestError> {
        check_levels(levels)?;
        if !self.is_fitted() {
            return Err(ForestError::NotFitted);
        }
        if contexts.ncols() != self.dim {
            return Err(ForestError::InvalidInput(format!(
                "contexts have {} features, expected {}",
                contexts.ncols(),
                self.dim
            )));
        }
        let rows: Vec<usize> = (0..contexts.nrows()).collect();
        let d = self.dim;
        let per_tree = 1.0 / self.trees.len() as f64;
        // Tree-major traversal per chunk keeps each tree hot in cache.
        Ok(rows
            .par_chunks(512)
            .flat_map_iter(|chunk| {
                let mut flat = Vec::with_capacity(chunk.len() * d);
                for &i in chunk {
                    flat.extend(contexts.row(i).iter().copied());
                }
                let mut leaves = vec![(0usize, 0usize); chunk.len() * self.trees.len()];
                for (t, tree) in self.trees.iter().enumerate() {
                    for j in 0..chunk.len() {
                        leaves[j * self.trees.len() + t] = tree.leaf_range(&flat[j * d..(j + 1) * d]);
                    }
                }
                let mut buf = vec![0.0; self.sorted_outcomes.len()];
                let mut out = [0.0; 2];
                (0..chunk.len())
                    .map(|j| {
                        buf.fill(0.0);
                        for (tree, &(start, len)) in self.trees.iter().zip(&leaves[j * self.trees.len()..]) {
                            let w = per_tree / len as f64;
                            for &r in &tree.leaf_ranks[start..start + len] {
                                buf[r as usize] += w;
                            }
                        }
                        self.quantiles_from(&buf, &[levels.0, levels.1], &mut out);
                        (out[0], out[1])
                    })
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// Forest-weighted mean of training outcomes.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64, ForestError> {
        self.check(x)?;
        let mut by_rank = Vec::new();
        self.rank_weights(x, &mut by_rank);
        Ok(by_rank.iter().zip(&self.sorted_outcomes).map(|(w, y)| w * y).sum())
    }

    pub fn predict_mean_batch(&self, contexts: ArrayView2<'_, f64>) -> Result<Vec<f64>, ForestError> {
        contexts
            .outer_iter()
            .map(|r| self.predict_mean(&r.to_vec()))
            .collect()
    }
}

fn check_levels((lo, hi): (f64, f64)) -> Result<(), ForestError> {
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(ForestError::InvalidInput(format!("levels ({lo}, {hi}) must satisfy 0 < lo <= hi < 1")));
    }
    Ok(())
}

/// Fit a forest in one call.
pub fn fit_forest(
    features: ArrayView2<'_, f64>,
    outcomes: &[f64],
    config: ForestConfig,
    seed: u64,
) -> Result<QuantileForest, ForestError> {
    let mut forest = QuantileForest::new(config);
    forest.fit(features, outcomes, seed)?;
    Ok(forest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy_data(n: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = stream(seed, 0, "forest-test");
        let x = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
        let normal = Normal::new(0.0, 1.0).unwrap();
        let y = (0..n)
            .map(|i| 3.0 * x[[i, 0]] + (1.0 + x[[i, 1 % d]]) * normal.sample(&mut rng))
            .collect();
        (x, y)
    }

    #[test]
    fn unfitted_forest_errors() {
        let f = QuantileForest::new(ForestConfig::default());
        assert!(matches!(f.predict_quantiles(&[0.0], (0.1, 0.9)), Err(ForestError::NotFitted)));
        assert!(matches!(f.predict_mean(&[0.0]), Err(ForestError::NotFitted)));
    }

    #[test]
    fn too_few_rows() {
        let x = Array2::<f64>::zeros((9, 1));
        let r = fit_forest(x.view(), &[0.0; 9], ForestConfig::default(), 0);
        assert!(matches!(r, Err(ForestError::InvalidInput(_))));
    }

    #[test]
    fn constant_outcomes() {
        let (x, _) = noisy_data(100, 3, 1);
        let f = fit_forest(x.view(), &[4.5; 100], ForestConfig::default().with_trees(20), 3).unwrap();
        let q = f.predict_quantiles(&[0.3, 0.2, 0.9], (0.05, 0.95)).unwrap();
        assert_eq!(q, (4.5, 4.5));
        assert_abs_diff_eq!(f.predict_mean(&[0.1, 0.1, 0.1]).unwrap(), 4.5, epsilon = 1e-12);
    }

    #[test]
    fn root_only_tree_is_empirical_distribution() {
        // Constant features admit no split, so the single tree is a root leaf.
        let x = Array2::<f64>::zeros((4, 1));
        let cfg = ForestConfig {
            num_trees: 1,
            min_leaf_size: 2,
            bootstrap: false,
            ..Default::default()
        };
        let f = fit_forest(x.view(), &[3.0, 1.0, 4.0, 2.0], cfg, 0).unwrap();
        assert_eq!(f.predict_quantiles(&[0.0], (0.25, 0.75)).unwrap(), (1.0, 3.0));
        assert_eq!(f.predict_quantiles(&[0.0], (0.5, 0.5)).unwrap(), (2.0, 2.0));
        assert_abs_diff_eq!(f.predict_mean(&[0.0]).unwrap(), 2.5, epsilon = 1e-15);

        // min_leaf_size = n on informative features also leaves the root alone.
        let (x, y) = noisy_data(40, 2, 2);
        let cfg = ForestConfig {
            num_trees: 1,
            min_leaf_size: 20,
            bootstrap: false,
            ..Default::default()
        };
        let f = fit_forest(x.view(), &y, cfg, 0).unwrap();
        let members = f.leaf_members(&[0.5, 0.5]).unwrap();
        assert!(members[0].len() >= 20);
    }

    #[test]
    fn leaves_respect_min_size_and_weights_sum_to_one() {
        let (x, y) = noisy_data(300, 4, 3);
        let f = fit_forest(x.view(), &y, ForestConfig::default().with_trees(50), 7).unwrap();
        let mut rng = stream(3, 1, "q");
        for _ in 0..50 {
            let q: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 1.2 - 0.1).collect();
            for leaf in f.leaf_members(&q).unwrap() {
                assert!(leaf.len() >= 5);
            }
            let w = f.weights(&q).unwrap();
            assert!(w.iter().all(|&v| v >= 0.0));
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn mean_matches_leaf_enumeration() {
        let (x, y) = noisy_data(200, 3, 4);
        let f = fit_forest(x.view(), &y, ForestConfig::default().with_trees(30), 11).unwrap();
        let mut rng = stream(4, 1, "q");
        for _ in 0..20 {
            let q: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let leaves = f.leaf_members(&q).unwrap();
            let brute = leaves
                .iter()
                .map(|leaf| leaf.iter().map(|&i| y[i]).sum::<f64>() / leaf.len() as f64)
                .sum::<f64>()
                / leaves.len() as f64;
            assert_abs_diff_eq!(f.predict_mean(&q).unwrap(), brute, epsilon = 1e-10);
        }
    }

    #[test]
    fn quantiles_match_brute_force_weights() {
        let (x, y) = noisy_data(150, 2, 5);
        let f = fit_forest(x.view(), &y, ForestConfig::default().with_trees(25), 13).unwrap();
        let q = [0.4, 0.7];
        let w = f.weights(&q).unwrap();
        let mut pairs: Vec<(f64, f64)> = y.iter().copied().zip(w.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for level in [0.05, 0.25, 0.5, 0.9, 0.95] {
            let mut cum = 0.0;
            let brute = pairs
                .iter()
                .find(|(_, wi)| {
                    cum += wi;
                    *wi > 0.0 && cum >= level - 1e-9
                })
                .unwrap()
                .0;
            assert_eq!(f.predict_levels(&q, &[level]).unwrap()[0], brute, "level {level}");
        }
    }

    #[test]
    fn seeded_determinism() {
        let (x, y) = noisy_data(200, 3, 6);
        let a = fit_forest(x.view(), &y, ForestConfig::default().with_trees(20), 5).unwrap();
        let b = fit_forest(x.view(), &y, ForestConfig::default().with_trees(20), 5).unwrap();
        let batch_a = a.predict_quantiles_batch(x.view(), (0.05, 0.95)).unwrap();
        let batch_b = b.predict_quantiles_batch(x.view(), (0.05, 0.95)).unwrap();
        assert_eq!(batch_a, batch_b);
        assert_eq!(batch_a[7], a.predict_quantiles(&x.row(7).to_vec(), (0.05, 0.95)).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantiles_monotone_in_level(seed in 0u64..1000, a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (x, y) = noisy_data(80, 2, seed);
            let f = fit_forest(x.view(), &y, ForestConfig::default().with_trees(10), seed).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut rng = stream(seed, 2, "q");
            for _ in 0..30 {
                let q = [rng.random::<f64>(), rng.random::<f64>()];
                let v = f.predict_levels(&q, &[lo, hi]).unwrap();
                prop_assert!(v[0] <= v[1]);
                let pair = f.predict_quantiles(&q, (lo, hi)).unwrap();
                prop_assert!(pair.0 <= pair.1);
            }
        }
    }
}
