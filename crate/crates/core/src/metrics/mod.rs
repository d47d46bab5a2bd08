//! Evaluation metrics: confusion matrices, precision/recall/F-beta (per
//! class, macro-averaged and collapsed to interference detection), plus an
//! exact t-SNE projection for embedding plots.

mod tsne;

pub use tsne::{joint_probabilities, kl_divergence, tsne, TsneConfig, TsneResult};

use crate::error::{ensure, Result};
use crate::NUM_CLASSES;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

/// First interference label; 0–2 are background-only classes.
pub const FIRST_INTERFERENCE_CLASS: usize = 3;

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    /// trace / total, 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.get(c, c), self.col_sum(c))
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.get(c, c), self.row_sum(c))
    }

    /// Mean recall over the listed classes that have test samples.
    pub fn mean_recall(&self, classes: &[usize]) -> f64 {
        let present: Vec<usize> = classes.iter().copied().filter(|&c| self.row_sum(c) > 0).collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|&c| self.recall(c)).sum::<f64>() / present.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for p in 0..self.num_classes {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
        for t in 0..self.num_classes {
            write!(out, "{t}").unwrap();
            for p in 0..self.num_classes {
                write!(out, ",{}", self.get(t, p)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    ensure!(truth.len() == pred.len(), "{} true labels vs {} predictions", truth.len(), pred.len());
    let mut m = ConfusionMatrix::zeros(num_classes);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        ensure!(t < num_classes && p < num_classes, "label pair ({t}, {p}) at {i} outside [0, {num_classes})");
        m.counts[t * num_classes + p] += 1;
    }
    Ok(m)
}

/// `(1 + β²) P R / (β² P + R)`, 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
    pub support: u64,
}

/// Interference-vs-background detection scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
}

/// Collapses the 11-class matrix to background (0–2) vs interference (3–10).
pub fn binary_detection_metrics(m: &ConfusionMatrix) -> Result<BinaryMetrics> {
    ensure!(
        m.num_classes == NUM_CLASSES,
        "binary collapse needs the {NUM_CLASSES}-class layout, got {}",
        m.num_classes
    );
    let positive = |c: usize| c >= FIRST_INTERFERENCE_CLASS;
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for t in 0..m.num_classes {
        for p in 0..m.num_classes {
            let n = m.get(t, p);
            match (positive(t), positive(p)) {
                (true, true) => tp += n,
                (false, true) => fp += n,
                (false, false) => tn += n,
                (true, false) => fneg += n,
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    Ok(BinaryMetrics {
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
        accuracy: ratio(tp + tn, tp + fp + tn + fneg),
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        f2: f_beta(precision, recall, 2.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Averages over classes with at least one true sample.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_f2: f64,
    pub binary: Option<BinaryMetrics>,
}

impl MetricReport {
    pub fn from_confusion(m: &ConfusionMatrix) -> Self {
        let per_class: Vec<ClassMetrics> = (0..m.num_classes)
            .map(|c| {
                let (p, r) = (m.precision(c), m.recall(c));
                ClassMetrics { class: c, precision: p, recall: r, f1: f_beta(p, r, 1.0), f2: f_beta(p, r, 2.0), support: m.row_sum(c) }
            })
            .collect();
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
        let avg = |f: fn(&ClassMetrics) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
            }
        };
        Self {
            accuracy: m.accuracy(),
            macro_precision: avg(|c| c.precision),
            macro_recall: avg(|c| c.recall),
            macro_f1: avg(|c| c.f1),
            macro_f2: avg(|c| c.f2),
            binary: binary_detection_metrics(m).ok(),
            per_class,
        }
    }

    /// Two-column `metric,value` CSV with fixed formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| writeln!(out, "{k},{v:.6}").unwrap();
        row("accuracy", self.accuracy);
        row("macro_precision", self.macro_precision);
        row("macro_recall", self.macro_recall);
        row("macro_f1", self.macro_f1);
        row("macro_f2", self.macro_f2);
        if let Some(b) = &self.binary {
            row("binary_accuracy", b.accuracy);
            row("binary_precision", b.precision);
            row("binary_recall", b.recall);
            row("binary_f1", b.f1);
            row("binary_f2", b.f2);
        }
        for c in &self.per_class {
            row(&format!("class_{}_precision", c.class), c.precision);
            row(&format!("class_{}_recall", c.class), c.recall);
            row(&format!("class_{}_f2", c.class), c.f2);
            row(&format!("class_{}_support", c.class), c.support as f64);
        }
        out
    }
}
