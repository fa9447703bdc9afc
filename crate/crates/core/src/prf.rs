use serde::{Deserialize, Serialize};

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    /// `hits / predicted` and `hits / expected`, with `0/0 = 0`.
    pub fn from_counts(hits: f64, predicted: f64, expected: f64) -> Self {
        let ratio = |n: f64, d: f64| if d == 0.0 { 0.0 } else { n / d };
        Self::new(ratio(hits, predicted), ratio(hits, expected))
    }

    pub fn perfect() -> Self {
        Self::new(1.0, 1.0)
    }
}
