use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Classification metrics over `K` classes. The confusion matrix has true
/// classes as rows and predictions as columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    /// One-vs-rest `(fpr, tpr)` points per class; empty without scores or
    /// when a class has no positives or no negatives.
    pub roc: Vec<Vec<(f64, f64)>>,
    pub auc: Vec<Option<f64>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROC points from a threshold sweep over every distinct score, highest first.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<Vec<(f64, f64)>> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Some(points)
}

/// Trapezoid-rule area under a curve given in increasing-x order.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

impl MetricsReport {
    /// Rates and averages from a confusion matrix alone.
    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<usize>>) -> Result<Self> {
        let k = classes.len();
        if confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::invalid(format!("confusion matrix must be {k}×{k}")));
        }
        let total: usize = confusion.iter().flatten().sum();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                ClassMetrics {
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k.max(1) as f64;
        let weighted = |f: fn(&ClassMetrics) -> f64| {
            if total == 0 {
                0.0
            } else {
                per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
            }
        };
        let (fp, fr, ff): (fn(&ClassMetrics) -> f64, fn(&ClassMetrics) -> f64, fn(&ClassMetrics) -> f64) =
            (|m| m.precision, |m| m.recall, |m| m.f1);
        let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
        Ok(Self {
            macro_avg: Averages {
                precision: mean(fp),
                recall: mean(fr),
                f1: mean(ff),
            },
            weighted_avg: Averages {
                precision: weighted(fp),
                recall: weighted(fr),
                f1: weighted(ff),
            },
            accuracy: ratio(trace, total),
            classes,
            confusion,
            per_class,
            roc: vec![Vec::new(); k],
            auc: vec![None; k],
        })
    }

    /// Argmax predictions plus one-vs-rest ROC/AUC from per-class scores.
    pub fn from_scores(classes: Vec<String>, labels: &[usize], scores: &[Vec<f64>]) -> Result<Self> {
        let k = classes.len();
        if labels.len() != scores.len() {
            return Err(Error::invalid("labels and scores differ in length"));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&y, s) in labels.iter().zip(scores) {
            if y >= k || s.len() != k {
                return Err(Error::invalid(format!("sample with label {y} and {} scores", s.len())));
            }
            confusion[y][argmax(s)] += 1;
        }
        let mut report = Self::from_confusion(classes, confusion)?;
        for c in 0..k {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            if let Some(points) = roc_curve(&col, &pos) {
                report.auc[c] = Some(auc(&points));
                report.roc[c] = points;
            }
        }
        Ok(report)
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Aligned confusion matrix, true classes down, predictions across.
    pub fn confusion_table(&self) -> String {
        let w = self.classes.iter().map(String::len).max().unwrap_or(4).max(6);
        let mut out = format!("{:>w$}", "true\\pred");
        for c in &self.classes {
            let _ = write!(out, " {c:>w$}");
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            let _ = write!(out, "{c:>w$}");
            for v in row {
                let _ = write!(out, " {v:>w$}");
            }
            out.push('\n');
        }
        out
    }

    /// Per-class precision/recall/F1/support with averages, two decimals.
    pub fn class_table(&self) -> String {
        let w = self.classes.iter().map(String::len).max().unwrap_or(0).max(12);
        let mut out = format!("{:>w$} {:>9} {:>9} {:>9} {:>9}\n", "", "precision", "recall", "f1-score", "support");
        for (c, m) in self.classes.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{c:>w$} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        let n = self.total();
        let _ = writeln!(out, "\n{:>w$} {:>9} {:>9} {:>9.2} {:>9}", "accuracy", "", "", self.accuracy, n);
        for (name, a) in [("macro avg", self.macro_avg), ("weighted avg", self.weighted_avg)] {
            let _ = writeln!(
                out,
                "{name:>w$} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                a.precision, a.recall, a.f1, n
            );
        }
        out
    }

    /// `class,fpr,tpr` rows for every class that has a curve.
    pub fn roc_csv(&self) -> Option<String> {
        if self.roc.iter().all(Vec::is_empty) {
            return None;
        }
        let mut out = String::from("class,fpr,tpr\n");
        for (c, pts) in self.classes.iter().zip(&self.roc) {
            for (x, y) in pts {
                let _ = writeln!(out, "{c},{x},{y}");
            }
        }
        Some(out)
    }
}
