//! Layer primitives shared by the eager forward pass and the tape.

use rand::Rng;

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `input · weights + bias`, with `bias` broadcast over rows.
pub fn dense_forward(input: &Matrix, weights: &Matrix, bias: &Matrix) -> Result<Matrix> {
    let mut out = input.matmul(weights)?;
    add_row_bias(&mut out, bias)?;
    Ok(out)
}

pub(crate) fn add_row_bias(out: &mut Matrix, bias: &Matrix) -> Result<()> {
    if bias.len() != out.cols() {
        return Err(Error::dim(format!(
            "bias of length {} for {} output columns",
            bias.len(),
            out.cols()
        )));
    }
    let cols = out.cols();
    for row in out.as_mut_slice().chunks_exact_mut(cols.max(1)) {
        for (o, &b) in row.iter_mut().zip(bias.as_slice()) {
            *o += b;
        }
    }
    Ok(())
}

pub fn relu(input: &Matrix) -> Matrix {
    input.map(|v| v.max(0.0))
}

/// Max-subtracted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax of non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.iter_rows() {
        data.extend(softmax(row)?);
    }
    Matrix::new(logits.rows(), logits.cols(), data)
}

/// Mean negative log-likelihood of `targets` under row-stochastic `probs`.
pub fn cross_entropy(probs: &Matrix, targets: &[usize]) -> Result<f64> {
    if probs.rows() != targets.len() {
        return Err(Error::dim(format!(
            "{} probability rows for {} targets",
            probs.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Domain("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (i, (row, &t)) in probs.iter_rows().zip(targets).enumerate() {
        if t >= row.len() {
            return Err(Error::Domain(format!(
                "target {t} of sample {i} out of range for {} classes",
                row.len()
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "probability row {i} sums to {s}"
            )));
        }
        total -= row[t].max(PROB_FLOOR).ln();
    }
    Ok(total / targets.len() as f64)
}

/// Plain gradient descent step `p <- p - lr * grad`.
///
/// A zero rate is accepted and leaves parameters untouched.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::config(format!(
            "learning rate must be a non-negative finite number, got {lr}"
        )));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for id in params.ids().collect::<Vec<_>>() {
        let grad = params.grad(id).clone();
        params.value_mut(id).add_assign_scaled(&grad, -lr)?;
    }
    Ok(())
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight and bias for a dense layer.
pub fn init_dense<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Matrix, Matrix) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    let w = Matrix::new(fan_in, fan_out, draw(fan_in * fan_out)).expect("sized by construction");
    let b = Matrix::new(1, fan_out, draw(fan_out)).expect("sized by construction");
    (w, b)
}
