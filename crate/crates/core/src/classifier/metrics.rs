//! Per-class precision/recall/F1 from confusion counts.

use crate::text::TokenLabel;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Counts indexed by (truth, prediction).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub accurate_as_accurate: usize,
    pub accurate_as_inaccurate: usize,
    pub inaccurate_as_accurate: usize,
    pub inaccurate_as_inaccurate: usize,
}

impl Confusion {
    pub fn from_pairs<I: IntoIterator<Item = (TokenLabel, TokenLabel)>>(pairs: I) -> Self {
        let mut c = Confusion::default();
        for (truth, pred) in pairs {
            match (truth, pred) {
                (TokenLabel::Accurate, TokenLabel::Accurate) => c.accurate_as_accurate += 1,
                (TokenLabel::Accurate, TokenLabel::Inaccurate) => c.accurate_as_inaccurate += 1,
                (TokenLabel::Inaccurate, TokenLabel::Accurate) => c.inaccurate_as_accurate += 1,
                (TokenLabel::Inaccurate, TokenLabel::Inaccurate) => c.inaccurate_as_inaccurate += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.accurate_as_accurate + self.accurate_as_inaccurate + self.inaccurate_as_accurate + self.inaccurate_as_inaccurate
    }

    /// `(true positives, false positives, false negatives)` for `class`.
    pub fn counts(&self, class: TokenLabel) -> (usize, usize, usize) {
        match class {
            TokenLabel::Accurate => (self.accurate_as_accurate, self.inaccurate_as_accurate, self.accurate_as_inaccurate),
            TokenLabel::Inaccurate => (self.inaccurate_as_inaccurate, self.accurate_as_inaccurate, self.inaccurate_as_accurate),
        }
    }

    pub fn class_metrics(&self, class: TokenLabel) -> ClassMetrics {
        let (tp, fp, fn_) = self.counts(class);
        let support = tp + fn_;
        let predicted = tp + fp;
        // A class absent from the truth has undefined recall and F1; a class
        // never predicted has precision 0.
        let precision = if predicted > 0 {
            Some(tp as f64 / predicted as f64)
        } else if support > 0 {
            Some(0.0)
        } else {
            None
        };
        let recall = (support > 0).then(|| tp as f64 / support as f64);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support,
        }
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            (self.accurate_as_accurate + self.inaccurate_as_inaccurate) as f64 / t as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when undefined (see [`Confusion::class_metrics`]).
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accurate: ClassMetrics,
    pub inaccurate: ClassMetrics,
    pub accuracy: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        Self {
            accurate: confusion.class_metrics(TokenLabel::Accurate),
            inaccurate: confusion.class_metrics(TokenLabel::Inaccurate),
            accuracy: confusion.accuracy(),
            confusion,
        }
    }

    pub fn evaluate(truth: &[TokenLabel], predicted: &[TokenLabel]) -> Self {
        Self::from_confusion(Confusion::from_pairs(truth.iter().copied().zip(predicted.iter().copied())))
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "   n/a".to_string(), |x| format!("{x:.4}"))
}

/// One table row: `precision recall F1` for INACCURATE then ACCURATE.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} | {} {} {}",
            cell(self.inaccurate.precision),
            cell(self.inaccurate.recall),
            cell(self.inaccurate.f1),
            cell(self.accurate.precision),
            cell(self.accurate.recall),
            cell(self.accurate.f1),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_baseline_row() {
        // 7306 accurate / 2694 inaccurate, always predict ACCURATE.
        let c = Confusion {
            accurate_as_accurate: 7306,
            inaccurate_as_accurate: 2694,
            ..Confusion::default()
        };
        let r = EvalReport::from_confusion(c);
        assert!((r.accurate.precision.unwrap() - 0.7306).abs() < 1e-12);
        assert_eq!(r.accurate.recall, Some(1.0));
        let f1 = 2.0 * 0.7306 / 1.7306;
        assert!((r.accurate.f1.unwrap() - f1).abs() < 1e-6);
        assert!((f1 - 0.8443).abs() < 5e-5);
        assert_eq!(r.inaccurate.precision, Some(0.0));
        assert_eq!(r.inaccurate.f1, Some(0.0));
    }

    #[test]
    fn perfect_predictor() {
        let truth = [TokenLabel::Accurate, TokenLabel::Inaccurate, TokenLabel::Accurate];
        let r = EvalReport::evaluate(&truth, &truth);
        for m in [r.accurate, r.inaccurate] {
            assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0)));
        }
    }

    #[test]
    fn empty_class_is_undefined() {
        let truth = [TokenLabel::Accurate; 4];
        let r = EvalReport::evaluate(&truth, &truth);
        assert_eq!(r.inaccurate.recall, None);
        assert_eq!(r.inaccurate.f1, None);
        assert_eq!(r.inaccurate.precision, None);
        assert!(r.to_string().contains("n/a"));
    }
}
