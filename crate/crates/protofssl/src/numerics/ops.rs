//! Stable softmax, cross-entropy and distance primitives.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities before any logarithm, so confident
/// mispredictions produce a large finite loss instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Squared Euclidean distances between all row pairs: out[i][j] = ||a_i - b_j||^2.
pub fn pairwise_sq_dist<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape(
            "pairwise_sq_dist",
            "rank-2 tensors",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "pairwise_sq_dist inner dimension",
            a.cols(),
            b.cols(),
        ));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let ri = a.row(i);
        for j in 0..m {
            let rj = b.row(j);
            let mut acc = F::zero();
            for (x, y) in ri.iter().zip(rj.iter()) {
                let d = *x - *y;
                acc += d * d;
            }
            out.set2(i, j, acc);
        }
    }
    Ok(out)
}

/// Squared Euclidean distance between two vectors.
pub fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Row-wise softmax with max subtraction.
pub fn softmax<F: Real>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    if logits.shape().len() != 2 {
        return Err(Error::shape("softmax", "rank-2 tensor", format!("{:?}", logits.shape())));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_row_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// In-place stable softmax of one row of logits.
pub fn softmax_row_in_place<F: Real>(row: &mut [F]) {
    let max = row
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Mean cross-entropy between soft target rows and predicted probability rows.
///
/// Predictions are clamped at [`PROB_FLOOR`] before the logarithm; targets are
/// used as-is, so soft targets are supported.
pub fn cross_entropy<F: Real>(target: &Tensor<F>, pred: &Tensor<F>) -> Result<F> {
    if target.shape() != pred.shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if target.rows() == 0 {
        return Err(Error::EmptyInput("cross_entropy".into()));
    }
    let floor = F::from_f64_c(PROB_FLOOR);
    let mut total = F::zero();
    for i in 0..target.rows() {
        let mut row_loss = F::zero();
        for (t, p) in target.row(i).iter().zip(pred.row(i).iter()) {
            if *t > F::zero() {
                let clamped = if *p < floor { floor } else { *p };
                row_loss -= *t * clamped.ln();
            }
        }
        total += row_loss;
    }
    Ok(total / F::from_f64_c(target.rows() as f64))
}
