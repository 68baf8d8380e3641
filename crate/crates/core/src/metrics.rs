//! Accuracy with macro-averaged F1 and recall. A class whose precision or
//! recall denominator is zero contributes 0 to the macro mean, and the mean
//! always divides by the full class count.

use serde::{Deserialize, Serialize};

use crate::selection::SelectionResult;
use crate::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), found: predicted.len() });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub acc: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
}

pub fn macro_scores(cm: &ConfusionMatrix) -> Result<MacroScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let c = cm.classes();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut f1_sum, mut recall_sum) = (0.0, 0.0);
    for k in 0..c {
        let tp = cm.counts[k][k];
        let row: u64 = cm.counts[k].iter().sum();
        let col: u64 = cm.counts.iter().map(|r| r[k]).sum();
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        recall_sum += recall;
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(MacroScores { acc: ratio(cm.trace(), total), macro_f1: f1_sum / c as f64, macro_recall: recall_sum / c as f64 })
}

/// Metric report as written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: u64,
    pub acc: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate(truth: &[usize], predicted: &[usize], classes: usize) -> Result<MetricReport> {
    let cm = confusion(truth, predicted, classes)?;
    let s = macro_scores(&cm)?;
    Ok(MetricReport {
        n: cm.total(),
        acc: s.acc,
        macro_f1: s.macro_f1,
        macro_recall: s.macro_recall,
        confusion: cm.counts,
    })
}

/// Quality of the pseudo-labels a selection kept, measured against ground truth.
pub fn pseudo_label_report(
    selection: &SelectionResult,
    ground_truth: &[Option<usize>],
    classes: usize,
) -> Result<MetricReport> {
    let mut truth = Vec::with_capacity(selection.len());
    for s in &selection.selected {
        match ground_truth.get(s.index).copied().flatten() {
            Some(t) => truth.push(t),
            None => return Err(Error::SampleMismatch(format!("no ground truth for row {}", s.index))),
        }
    }
    evaluate(&truth, &selection.labels(), classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::{LabeledSample, Stage};

    #[test]
    fn perfect_predictions() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let s = macro_scores(&cm).unwrap();
        assert_eq!((s.acc, s.macro_f1, s.macro_recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_prediction_fills_one_column() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 0, 0, 0], 3).unwrap();
        assert!(cm.counts.iter().all(|r| r[1] == 0 && r[2] == 0));
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn balanced_two_class() {
        let cm = ConfusionMatrix { counts: vec![vec![3, 1], vec![1, 3]] };
        let s = macro_scores(&cm).unwrap();
        assert_eq!((s.acc, s.macro_f1, s.macro_recall), (0.75, 0.75, 0.75));
    }

    #[test]
    fn absent_class_contributes_zero() {
        // class 2 never true, never predicted
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        let s = macro_scores(&cm).unwrap();
        assert_eq!(s.acc, 1.0);
        assert!((s.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.macro_recall - 2.0 / 3.0).abs() < 1e-15);
        let single = macro_scores(&confusion(&[0, 0], &[0, 0], 1).unwrap()).unwrap();
        assert_eq!((single.acc, single.macro_f1, single.macro_recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn errors() {
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(macro_scores(&ConfusionMatrix { counts: vec![vec![0]] }).is_err());
    }

    #[test]
    fn pseudo_label_quality() {
        let truth = vec![Some(0), Some(1), Some(1), None];
        let sel = SelectionResult::from_selected(
            Stage::Mvc,
            4,
            vec![LabeledSample { index: 0, label: 0 }, LabeledSample { index: 2, label: 0 }],
        )
        .unwrap();
        let r = pseudo_label_report(&sel, &truth, 2).unwrap();
        assert_eq!(r.n, 2);
        assert_eq!(r.acc, 0.5);
        let bad = SelectionResult::from_selected(Stage::Mvc, 4, vec![LabeledSample { index: 3, label: 0 }]).unwrap();
        assert!(pseudo_label_report(&bad, &truth, 2).is_err());
    }
}
