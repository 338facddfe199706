//! Reference model: logistic regression on the most recent event row plus the
//! statics, ignoring everything earlier in the sequence.

use nalgebra::{DMatrix, DVector};

use crate::encode::EncodedSequence;
use crate::error::{Error, Result};
use crate::gru::sigmoid;

pub const DEFAULT_RIDGE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LastEventLogistic {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn last_event_features(seq: &EncodedSequence) -> Vec<f64> {
    seq.last_row()
        .iter()
        .map(|&v| f64::from(v))
        .chain(seq.statics.iter().copied())
        .collect()
}

impl LastEventLogistic {
    /// Ridge-penalised maximum likelihood by Newton iterations (the intercept
    /// is not penalised).
    pub fn fit(train: &[&EncodedSequence], ridge: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("cannot fit a baseline on no data".into()));
        }
        let rows: Vec<Vec<f64>> = train.iter().map(|s| last_event_features(s)).collect();
        let p = rows[0].len() + 1;
        let n = rows.len();
        let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
        let y = DVector::from_iterator(n, train.iter().map(|s| f64::from(s.label)));
        let mut penalty = DMatrix::identity(p, p) * ridge;
        penalty[(0, 0)] = 0.0;

        let mut beta = DVector::zeros(p);
        for _ in 0..100 {
            let mu = (&x * &beta).map(sigmoid);
            let w = mu.map(|m| m * (1.0 - m));
            let grad = x.transpose() * (&y - &mu) - &penalty * &beta;
            let mut xw = x.clone();
            for (i, mut row) in xw.row_iter_mut().enumerate() {
                row *= w[i];
            }
            let hessian = x.transpose() * xw + &penalty;
            let step = hessian
                .cholesky()
                .ok_or_else(|| {
                    Error::NonFinite("baseline Hessian is not positive definite".into())
                })?
                .solve(&grad);
            beta += &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("baseline coefficients".into()));
        }
        Ok(LastEventLogistic {
            bias: beta[0],
            weights: beta.iter().skip(1).copied().collect(),
        })
    }

    pub fn predict(&self, seq: &EncodedSequence) -> f64 {
        let z: f64 = last_event_features(seq)
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum();
        sigmoid(z + self.bias)
    }
}
