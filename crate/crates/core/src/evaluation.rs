//! Exact and 1-off accuracy, confusion matrices and the per-class
//! classification report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::AgeClass;

fn check_pairs(preds: &[usize], truths: &[usize], classes: usize) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no labels to evaluate".into()));
    }
    if let Some(bad) = preds.iter().chain(truths).find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

pub fn exact_accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_pairs(preds, truths, usize::MAX)?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of predictions at most one class index away from the truth.
pub fn one_off_accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_pairs(preds, truths, usize::MAX)?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| p.abs_diff(**t) <= 1).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Rows are true labels, columns predicted labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], truths: &[usize], classes: usize) -> Result<Self> {
        check_pairs(preds, truths, classes)?;
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &t) in preds.iter().zip(truths) {
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

pub fn confusion(preds: &[usize], truths: &[usize]) -> Result<ConfusionMatrix> {
    ConfusionMatrix::new(preds, truths, AgeClass::LABELS.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
    /// Classes where some rate had a zero denominator and was set to 0.
    pub zero_division: Vec<usize>,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        // The harmonic mean never exceeds the larger rate; the clamp only
        // removes a last-bit rounding excess when p == r.
        (2.0 * p * r / (p + r)).min(p.max(r))
    }
}

/// Unweighted mean.
pub fn macro_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn classification_report(preds: &[usize], truths: &[usize]) -> Result<ClassReport> {
    report_for(&confusion(preds, truths)?)
}

pub fn report_for(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("no labels to evaluate".into()));
    }
    let n = cm.classes();
    let mut per_class = Vec::with_capacity(n);
    let mut zero_division = Vec::new();
    for c in 0..n {
        let tp = cm.counts[c][c];
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = cm.counts.iter().map(|row| row[c]).sum();
        let rate = |den: u64| if den == 0 { 0.0 } else { tp as f64 / den as f64 };
        if support == 0 || predicted == 0 {
            zero_division.push(c);
        }
        let (precision, recall) = (rate(predicted), rate(support));
        per_class.push(ClassMetrics { precision, recall, f1: f1(precision, recall), support });
    }
    let avg = |weight: &dyn Fn(&ClassMetrics) -> f64| {
        let wsum: f64 = per_class.iter().map(weight).sum();
        let m = |get: fn(&ClassMetrics) -> f64| per_class.iter().map(|c| weight(c) * get(c)).sum::<f64>() / wsum;
        ClassMetrics {
            precision: m(|c| c.precision),
            recall: m(|c| c.recall),
            f1: m(|c| c.f1),
            support: total,
        }
    };
    let macro_avg = avg(&|_| 1.0);
    let weighted_avg = avg(&|c| c.support as f64);
    Ok(ClassReport {
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
        macro_avg,
        weighted_avg,
        zero_division,
    })
}

impl ClassReport {
    /// Aligned plain text, rates to two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>12} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1-score", "support");
        let _ = writeln!(out);
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>12} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                class_name(c),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        let _ = writeln!(out);
        let total = self.macro_avg.support;
        let _ = writeln!(out, "{:>12} {:>9} {:>9} {:>9.2} {:>9}", "accuracy", "", "", self.accuracy, total);
        for (name, m) in [("macro avg", self.macro_avg), ("weighted avg", self.weighted_avg)] {
            let _ = writeln!(
                out,
                "{:>12} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                name, m.precision, m.recall, m.f1, m.support
            );
        }
        out
    }

    /// `name<TAB>precision<TAB>recall<TAB>f1<TAB>support`, full precision.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tprecision\trecall\tf1\tsupport\n");
        let mut row = |name: &str, m: &ClassMetrics| {
            let _ = writeln!(out, "{name}\t{}\t{}\t{}\t{}", m.precision, m.recall, m.f1, m.support);
        };
        for (c, m) in self.per_class.iter().enumerate() {
            row(&class_name(c), m);
        }
        row("macro_avg", &self.macro_avg);
        row("weighted_avg", &self.weighted_avg);
        let _ = writeln!(out, "accuracy\t{}\t\t\t{}", self.accuracy, self.macro_avg.support);
        out
    }
}

fn class_name(c: usize) -> String {
    AgeClass::new(c).map_or_else(|_| c.to_string(), |a| a.label().to_string())
}

/// Row-normalised matrix as aligned text with two decimals.
pub fn confusion_text(cm: &ConfusionMatrix) -> String {
    let mut out = format!("{:>8}", "true\\pred");
    for c in 0..cm.classes() {
        let _ = write!(out, " {:>6}", class_name(c));
    }
    out.push('\n');
    for (t, row) in cm.normalized().iter().enumerate() {
        let _ = write!(out, "{:>9}", class_name(t));
        for v in row {
            let _ = write!(out, " {v:>6.2}");
        }
        out.push('\n');
    }
    out
}

/// Everything the evaluate command reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationSummary {
    pub exact: f64,
    pub one_off: f64,
    pub confusion: ConfusionMatrix,
    pub report: ClassReport,
}

pub fn evaluate(preds: &[usize], truths: &[usize]) -> Result<EvaluationSummary> {
    Ok(EvaluationSummary {
        exact: exact_accuracy(preds, truths)?,
        one_off: one_off_accuracy(preds, truths)?,
        confusion: confusion(preds, truths)?,
        report: classification_report(preds, truths)?,
    })
}

impl EvaluationSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "exact accuracy: {:.4}", self.exact);
        let _ = writeln!(out, "1-off accuracy: {:.4}", self.one_off);
        let _ = writeln!(out, "\nnormalized confusion matrix:");
        out.push_str(&confusion_text(&self.confusion));
        let _ = writeln!(out, "\nclassification report:");
        out.push_str(&self.report.to_text());
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("metric\tvalue\nexact_accuracy\t{}\none_off_accuracy\t{}\n\n", self.exact, self.one_off);
        out.push_str("confusion");
        for c in 0..self.confusion.classes() {
            let _ = write!(out, "\t{}", class_name(c));
        }
        out.push('\n');
        for (t, row) in self.confusion.counts.iter().enumerate() {
            out.push_str(&class_name(t));
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&self.report.to_tsv());
        out
    }
}
