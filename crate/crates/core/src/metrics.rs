//! Accuracy, one-vs-rest specificity/sensitivity, agreement and macro-F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], preds: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != preds.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                preds.len()
            )));
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(preds) {
            for label in [t, p] {
                if label >= num_classes {
                    return Err(Error::Label { label, num_classes });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn predicted(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }

    /// Recall of `positive` one-vs-rest; `None` without positive samples.
    pub fn sensitivity(&self, positive: usize) -> Option<f64> {
        let p = self.support(positive);
        (p > 0).then(|| self.counts[positive][positive] as f64 / p as f64)
    }

    /// True-negative rate of `positive` one-vs-rest; `None` without negatives.
    pub fn specificity(&self, positive: usize) -> Option<f64> {
        let neg = self.total() - self.support(positive);
        let false_pos = self.predicted(positive) - self.counts[positive][positive];
        (neg > 0).then(|| (neg - false_pos) as f64 / neg as f64)
    }

    /// Per-class F1; classes with zero support and zero predictions score 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|k| {
                let tp = self.counts[k][k] as f64;
                let denom = (self.support(k) + self.predicted(k)) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let f1 = self.per_class_f1();
        f1.iter().sum::<f64>() / f1.len() as f64
    }
}

/// Macro-F1 of `preds` against `truth` over `num_classes` classes.
pub fn macro_f1(truth: &[usize], preds: &[usize], num_classes: usize) -> Result<f64> {
    Ok(ConfusionMatrix::from_predictions(truth, preds, num_classes)?.macro_f1())
}

/// Fraction of positions where the two prediction sequences agree.
pub fn agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "agreement needs equal nonempty sequences, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    /// Thief-victim agreement; absent for the victim's own baseline.
    pub agreement: Option<f64>,
    pub positive_class: usize,
    pub per_class_f1: Vec<f64>,
    pub n_test: usize,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix, positive_class: usize) -> Result<Self> {
        if positive_class >= cm.num_classes() {
            return Err(Error::Label {
                label: positive_class,
                num_classes: cm.num_classes(),
            });
        }
        let accuracy = cm
            .accuracy()
            .ok_or_else(|| Error::Data("metrics over an empty test set".into()))?;
        Ok(Self {
            accuracy,
            specificity: cm.specificity(positive_class),
            sensitivity: cm.sensitivity(positive_class),
            agreement: None,
            positive_class,
            per_class_f1: cm.per_class_f1(),
            n_test: cm.total() as usize,
            confusion: cm,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Thief metrics against ground truth plus agreement with the victim.
pub fn compute_metrics(
    thief_preds: &[usize],
    victim_preds: &[usize],
    true_labels: &[usize],
    positive_class: usize,
    num_classes: usize,
) -> Result<MetricsReport> {
    if thief_preds.len() != victim_preds.len() || thief_preds.len() != true_labels.len() {
        return Err(Error::Shape(format!(
            "thief {}, victim {}, truth {} predictions",
            thief_preds.len(),
            victim_preds.len(),
            true_labels.len()
        )));
    }
    if thief_preds.is_empty() {
        return Err(Error::Data("metrics over an empty test set".into()));
    }
    let cm = ConfusionMatrix::from_predictions(true_labels, thief_preds, num_classes)?;
    let mut report = MetricsReport::from_confusion(cm, positive_class)?;
    report.agreement = Some(agreement(thief_preds, victim_preds)?);
    Ok(report)
}

/// The victim's own test metrics, with agreement omitted.
pub fn report_victim_baseline(
    victim_preds: &[usize],
    true_labels: &[usize],
    positive_class: usize,
    num_classes: usize,
) -> Result<MetricsReport> {
    if victim_preds.is_empty() {
        return Err(Error::Data("metrics over an empty test set".into()));
    }
    let cm = ConfusionMatrix::from_predictions(true_labels, victim_preds, num_classes)?;
    MetricsReport::from_confusion(cm, positive_class)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Plain-text table with columns Method | Acc. | Spec. | Sens. | Agr.
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>6} | {:>6} | {:>6} | {:>6}",
        "Method", "Acc.", "Spec.", "Sens.", "Agr."
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 39));
    for (method, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>6} | {:>6} | {:>6} | {:>6}",
            method,
            pct(Some(r.accuracy)),
            pct(r.specificity),
            pct(r.sensitivity),
            pct(r.agreement)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_example() -> ConfusionMatrix {
        ConfusionMatrix {
            counts: vec![vec![8, 2], vec![1, 9]],
        }
    }

    #[test]
    fn binary_confusion_example() {
        let r = MetricsReport::from_confusion(binary_example(), 1).unwrap();
        assert_eq!(r.accuracy, 0.85);
        assert_eq!(r.specificity, Some(0.8));
        assert_eq!(r.sensitivity, Some(0.9));
    }

    #[test]
    fn agreement_counts() {
        assert_eq!(agreement(&[0, 1, 2, 1], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(agreement(&[], &[]).is_err());
    }

    #[test]
    fn perfect_thief_ignores_victim() {
        let truth = [0, 1, 2, 2];
        let r = compute_metrics(&truth, &[1, 1, 1, 1], &truth, 2, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.agreement, Some(0.25));
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        // Balanced binary set, everything predicted 0: F1 = (2/3 + 0) / 2.
        let v = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        // Class 2 has no support and no predictions: contributes 0.
        let v = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sensitivity_absent_without_positives() {
        let r = compute_metrics(&[0, 0], &[0, 0], &[0, 0], 1, 2).unwrap();
        assert_eq!(r.sensitivity, None);
        assert_eq!(r.specificity, Some(1.0));
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(compute_metrics(&[0], &[0, 1], &[0], 0, 2).is_err());
        assert!(compute_metrics(&[0], &[0], &[0], 5, 2).is_err());
    }

    #[test]
    fn table_has_one_row_per_method() {
        let r = MetricsReport::from_confusion(binary_example(), 1).unwrap();
        let t = render_table(&[("Random".into(), &r), ("Random+QW".into(), &r)]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("85.00"));
    }
}
