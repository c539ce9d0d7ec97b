//! Finite-difference verification of embedding gradients.

use super::AssessedModel;
use crate::error::{Error, Result};
use crate::text::TokenSequence;

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-8;

/// Central differences of `f` w.r.t. every entry of `point`.
pub fn central_difference_gradient<F>(f: F, point: &[Vec<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    let mut perturbed = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut row = Vec::with_capacity(point[i].len());
        for j in 0..point[i].len() {
            perturbed[i][j] = point[i][j] + h;
            let plus = f(&perturbed)?;
            perturbed[i][j] = point[i][j] - h;
            let minus = f(&perturbed)?;
            perturbed[i][j] = point[i][j];
            row.push((plus - minus) / (2.0 * h));
        }
        grad.push(row);
    }
    Ok(grad)
}

/// Max over positions and dimensions of `|analytic − fd| / (|fd| + ε)`.
pub fn gradcheck(model: &dyn AssessedModel, seq: &TokenSequence, target: usize) -> Result<f64> {
    model.require_gradients()?;
    let analytic = model.grad_embedding(seq, target)?;
    let embeddings = seq
        .tokens()
        .iter()
        .map(|t| model.embed(t))
        .collect::<Result<Vec<_>>>()?;
    let numeric = central_difference_gradient(
        |e| model.loss_at_embeddings(e, target),
        &embeddings,
        GRADCHECK_STEP,
    )?;
    max_relative_error(&analytic, &numeric)
}

pub(crate) fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::LengthMismatch(analytic.len(), numeric.len()));
    }
    let mut worst: f64 = 0.0;
    for (a_row, n_row) in analytic.iter().zip(numeric) {
        if a_row.len() != n_row.len() {
            return Err(Error::LengthMismatch(a_row.len(), n_row.len()));
        }
        for (a, n) in a_row.iter().zip(n_row) {
            worst = worst.max((a - n).abs() / (n.abs() + GRADCHECK_EPSILON));
        }
    }
    Ok(worst)
}
