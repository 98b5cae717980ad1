//! Ridge-regularised least-squares classifier used to measure how much
//! label information a feature set carries.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("probe needs at least one training row")]
    Empty,
    #[error("feature rows have inconsistent widths")]
    Width,
    #[error("labels ({labels}) and rows ({rows}) differ in count")]
    Count { labels: usize, rows: usize },
    #[error("normal equations are singular")]
    Singular,
}

/// Linear map from features (plus a bias) to one-hot class targets.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    weights: DMatrix<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearProbe {
    /// Standardises features, then solves `(XᵀX + ridge·I) W = XᵀY`.
    pub fn fit(rows: &[Vec<f64>], labels: &[usize], classes: usize, ridge: f64) -> Result<Self, ProbeError> {
        if rows.is_empty() {
            return Err(ProbeError::Empty);
        }
        if rows.len() != labels.len() {
            return Err(ProbeError::Count { labels: labels.len(), rows: rows.len() });
        }
        let f = rows[0].len();
        if rows.iter().any(|r| r.len() != f) {
            return Err(ProbeError::Width);
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..f).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..f)
            .map(|j| {
                let sd = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let probe = LinearProbe { weights: DMatrix::zeros(0, 0), mean, scale };
        let x = probe.design(rows);
        let mut y = DMatrix::zeros(rows.len(), classes);
        for (i, &l) in labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        let mut gram = x.transpose() * &x;
        for d in 0..f {
            gram[(d, d)] += ridge;
        }
        let rhs = x.transpose() * y;
        let weights = gram.cholesky().ok_or(ProbeError::Singular)?.solve(&rhs);
        Ok(LinearProbe { weights, ..probe })
    }

    fn design(&self, rows: &[Vec<f64>]) -> DMatrix<f64> {
        let f = self.mean.len();
        DMatrix::from_fn(rows.len(), f + 1, |i, j| {
            if j == f {
                1.0
            } else {
                (rows[i][j] - self.mean[j]) / self.scale[j]
            }
        })
    }

    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<usize> {
        let scores = self.design(rows) * &self.weights;
        (0..rows.len())
            .map(|i| {
                let row: DVector<f64> = scores.row(i).transpose();
                crate::metrics::argmax_rows(row.as_slice(), row.len())[0]
            })
            .collect()
    }

    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let pred = self.predict(rows);
        pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
    }
}

/// Fits on even-indexed rows and reports accuracy on odd-indexed rows.
pub fn split_probe_accuracy(rows: &[Vec<f64>], labels: &[usize], classes: usize, ridge: f64) -> Result<f64, ProbeError> {
    let pick = |parity: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
        rows.iter().zip(labels).enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, (r, &l))| (r.clone(), l)).unzip()
    };
    let (tx, ty) = pick(0);
    let (vx, vy) = pick(1);
    Ok(LinearProbe::fit(&tx, &ty, classes, ridge)?.accuracy(&vx, &vy))
}
