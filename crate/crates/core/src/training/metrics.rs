//! Confusion counts and the six detection scores (accuracy, false positive
//! and false negative rates, recall, precision, F-measure). Fire is the
//! positive class.

use std::fmt::Write as _;

use crate::dataio::Sample;
use crate::network::{Network, NetworkError, FIRE_CLASS};
use crate::tensor::Tensor;

/// Fire-probability threshold used for binary decisions.
pub const DECISION_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn record(&mut self, predicted_fire: bool, actual_fire: bool) {
        match (predicted_fire, actual_fire) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Non-fire inputs classified as fire, over all non-fire inputs.
    pub false_positive_rate: f64,
    /// Fire inputs classified as non-fire, over all fire inputs.
    pub false_negative_rate: f64,
    pub recall: f64,
    pub precision: f64,
    pub f_measure: f64,
    /// Scores whose denominator was zero; they are reported as 0.
    pub degenerate: Vec<&'static str>,
}

impl MetricsReport {
    /// Flat `key=value` block, one score per line.
    pub fn to_kv_block(&self, counts: &ConfusionCounts) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("false_positive_rate", self.false_positive_rate),
            ("false_negative_rate", self.false_negative_rate),
            ("recall", self.recall),
            ("precision", self.precision),
            ("f_measure", self.f_measure),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        let _ = writeln!(
            s,
            "tp={}\nfp={}\nfn={}\ntn={}\ntotal={}",
            counts.true_pos,
            counts.false_pos,
            counts.false_neg,
            counts.true_neg,
            counts.total()
        );
        let _ = writeln!(s, "degenerate={}", self.degenerate.join(","));
        s
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn compute_metrics(counts: &ConfusionCounts) -> MetricsReport {
    let mut degenerate = Vec::new();
    let mut ratio = |num: u64, den: u64, name: &'static str| {
        if den == 0 {
            degenerate.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let c = counts;
    let accuracy = ratio(c.true_pos + c.true_neg, c.total(), "accuracy");
    let false_positive_rate = ratio(c.false_pos, c.false_pos + c.true_neg, "false_positive_rate");
    let false_negative_rate = ratio(c.false_neg, c.false_neg + c.true_pos, "false_negative_rate");
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg, "recall");
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos, "precision");
    if precision + recall == 0.0 {
        degenerate.push("f_measure");
    }
    MetricsReport {
        accuracy,
        false_positive_rate,
        false_negative_rate,
        recall,
        precision,
        f_measure: f_measure(precision, recall),
        degenerate,
    }
}

/// Anything that maps a normalized `[side, side, 3]` image to a fire probability.
pub trait FireClassifier {
    fn fire_probability(&self, image: &Tensor) -> Result<f32, NetworkError>;
}

impl FireClassifier for Network<f32> {
    fn fire_probability(&self, image: &Tensor) -> Result<f32, NetworkError> {
        Ok(self.predict_image(image)?.data()[FIRE_CLASS])
    }
}

/// Evaluation-mode classification of `samples` at [`DECISION_THRESHOLD`].
pub fn evaluate<C: FireClassifier + ?Sized>(
    classifier: &C,
    samples: &[Sample],
) -> Result<(ConfusionCounts, MetricsReport), NetworkError> {
    if samples.is_empty() {
        return Err(NetworkError::InvalidConfig(
            "cannot evaluate an empty sample set".into(),
        ));
    }
    let mut counts = ConfusionCounts::default();
    for s in samples {
        let p = classifier.fire_probability(&s.image)?;
        counts.record(p >= DECISION_THRESHOLD, s.label == FIRE_CLASS);
    }
    Ok((counts, compute_metrics(&counts)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classifier() {
        let m = compute_metrics(&ConfusionCounts {
            true_pos: 50,
            true_neg: 50,
            ..Default::default()
        });
        assert_eq!((m.accuracy, m.recall, m.precision, m.f_measure), (1.0, 1.0, 1.0, 1.0));
        assert_eq!((m.false_positive_rate, m.false_negative_rate), (0.0, 0.0));
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn harmonic_mean_of_table_scores() {
        // 2 * 0.97 * 0.94 / 1.91
        let f = f_measure(0.97, 0.94);
        assert!((f - 0.954_764).abs() < 1e-4, "{f}");
        assert_eq!((f * 100.0).round(), 95.0);
    }

    #[test]
    fn no_positive_predictions_are_flagged() {
        let m = compute_metrics(&ConfusionCounts {
            false_neg: 3,
            true_neg: 7,
            ..Default::default()
        });
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.contains(&"precision"));
        assert!(m.degenerate.contains(&"f_measure"));
        assert_eq!(m.accuracy, 0.7);
        let empty = compute_metrics(&ConfusionCounts::default());
        assert_eq!(empty.accuracy, 0.0);
        assert!(empty.degenerate.contains(&"accuracy"));
    }

    #[test]
    fn kv_block_lists_every_score() {
        let counts = ConfusionCounts {
            true_pos: 3,
            false_pos: 1,
            false_neg: 2,
            true_neg: 4,
        };
        let block = compute_metrics(&counts).to_kv_block(&counts);
        for key in [
            "accuracy=",
            "false_positive_rate=",
            "false_negative_rate=",
            "recall=",
            "precision=",
            "f_measure=",
        ] {
            assert!(block.lines().any(|l| l.starts_with(key)), "{key} missing from\n{block}");
        }
        assert!(block.contains("accuracy=0.700000"));
    }
}
