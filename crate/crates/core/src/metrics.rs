//! Accuracy and macro-averaged recall / precision / F1.
//!
//! Classes with no support contribute recall 0; classes never predicted
//! contribute precision 0. Both still count toward the macro average.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub support: u64,
    pub predicted: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `confusion[truth][prediction]`
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::arg("cannot evaluate an empty prediction list"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::arg(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::arg("num_classes must be positive"));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(truths) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::arg(format!(
                "label out of range: pred {p}, truth {y}"
            )));
        }
        confusion[y][p] += 1;
    }
    let correct: u64 = (0..num_classes).map(|j| confusion[j][j]).sum();
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|j| {
            let tp = confusion[j][j];
            let support: u64 = confusion[j].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[j]).sum();
            let recall = ratio(tp, support);
            let precision = ratio(tp, predicted);
            let f1 = if recall + precision == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                support,
                predicted,
                recall,
                precision,
                f1,
            }
        })
        .collect();
    let mean =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / num_classes as f64;
    Ok(EvalReport {
        accuracy: ratio(correct, predictions.len() as u64),
        macro_recall: mean(|m| m.recall),
        macro_precision: mean(|m| m.precision),
        macro_f1: mean(|m| m.f1),
        confusion,
        per_class,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
}

pub fn mean_metrics(reports: &[EvalReport]) -> Result<MeanMetrics> {
    if reports.is_empty() {
        return Err(Error::arg("no reports to average"));
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MeanMetrics {
        accuracy: avg(|r| r.accuracy),
        macro_recall: avg(|r| r.macro_recall),
        macro_precision: avg(|r| r.macro_precision),
        macro_f1: avg(|r| r.macro_f1),
    })
}
