//! Prediction sets: finite unions of closed intervals on the extended line.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pieces: Vec<(f64, f64)>,
}

impl PredictionSet {
    pub fn empty() -> Self {
        Self { pieces: Vec::new() }
    }

    /// `[lo, hi]`; empty when `lo > hi`.
    pub fn interval(lo: f64, hi: f64) -> Self {
        if lo <= hi {
            Self {
                pieces: vec![(lo, hi)],
            }
        } else {
            Self::empty()
        }
    }

    pub fn full() -> Self {
        Self::interval(f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Union of arbitrary closed intervals. Empty or NaN pieces are dropped;
    /// overlapping or touching pieces are merged.
    pub fn from_pieces(mut raw: Vec<(f64, f64)>) -> Self {
        raw.retain(|&(lo, hi)| lo <= hi);
        raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut pieces: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (lo, hi) in raw {
            match pieces.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => pieces.push((lo, hi)),
            }
        }
        Self { pieces }
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn contains(&self, y: f64) -> bool {
        self.pieces.iter().any(|&(lo, hi)| lo <= y && y <= hi)
    }

    pub fn is_unbounded(&self) -> bool {
        self.pieces
            .iter()
            .any(|&(lo, hi)| lo == f64::NEG_INFINITY || hi == f64::INFINITY)
    }

    /// Lebesgue measure; `+inf` if any piece is unbounded.
    pub fn lebesgue_length(&self) -> f64 {
        self.pieces.iter().map(|&(lo, hi)| hi - lo).sum()
    }

    /// Smallest closed interval containing the set.
    pub fn hull(&self) -> Option<(f64, f64)> {
        Some((self.pieces.first()?.0, self.pieces.last()?.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_and_measures() {
        let s = PredictionSet::from_pieces(vec![(3.0, 4.0), (0.0, 1.0), (0.5, 2.0), (5.0, 4.0)]);
        assert_eq!(s.pieces(), &[(0.0, 2.0), (3.0, 4.0)]);
        assert_eq!(s.lebesgue_length(), 3.0);
        assert!(s.contains(2.0) && !s.contains(2.5) && s.contains(3.0));
        assert!(!s.is_unbounded());
    }

    #[test]
    fn unbounded_and_empty() {
        let f = PredictionSet::full();
        assert!(f.is_unbounded());
        assert_eq!(f.lebesgue_length(), f64::INFINITY);
        assert!(f.contains(1e300));
        let e = PredictionSet::interval(1.0, 0.0);
        assert!(e.is_empty());
        assert_eq!(e.lebesgue_length(), 0.0);
        let half = PredictionSet::interval(f64::NEG_INFINITY, 0.0);
        assert_eq!(half.lebesgue_length(), f64::INFINITY);
    }
}
