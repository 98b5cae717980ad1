//! Classification metrics over a confusion matrix.

use log::warn;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("predictions ({pred}) and targets ({truth}) differ in length")]
    Length { pred: usize, truth: usize },
    #[error("confusion matrix must be square and non-empty")]
    Shape,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Square count matrix; rows index the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(MetricsError::Shape);
        }
        Ok(ConfusionMatrix { classes: c, counts: rows.concat() })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(MetricsError::Length { pred: pred.len(), truth: truth.len() });
        }
        let mut m = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for label in [truth, pred] {
            if label >= self.classes {
                return Err(MetricsError::Label { label, classes: self.classes });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(MetricsError::Shape);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(|r| r.to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub kappa: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let c = confusion.classes();
        let total = confusion.total() as f64;
        let trace: u64 = (0..c).map(|i| confusion.get(i, i)).sum();
        let accuracy = if total > 0.0 { trace as f64 / total } else { 0.0 };

        let per_class_f1: Vec<f64> = (0..c)
            .map(|k| {
                let tp = confusion.get(k, k) as f64;
                let denom = (confusion.row_sum(k) + confusion.col_sum(k)) as f64;
                if denom == 0.0 {
                    warn!("class {k} has no true or predicted samples; F1 set to 0");
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect();
        let macro_f1 = per_class_f1.iter().sum::<f64>() / c as f64;

        let kappa = if total == 0.0 {
            0.0
        } else {
            let pe: f64 =
                (0..c).map(|k| confusion.row_sum(k) as f64 * confusion.col_sum(k) as f64).sum::<f64>() / (total * total);
            if pe >= 1.0 {
                warn!("chance agreement is 1; kappa set to 0");
                0.0
            } else {
                (accuracy - pe) / (1.0 - pe)
            }
        };

        Metrics { confusion, accuracy, per_class_f1, macro_f1, kappa }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        Ok(Self::from_confusion(ConfusionMatrix::from_predictions(truth, pred, classes)?))
    }
}

/// Row-wise argmax of a row-major `[rows, cols]` buffer; ties go to the lowest index.
pub fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
