//! Latent-space regression losses.

use crate::error::{Error, Result};

/// Mean over elements of the smooth-L1 penalty with threshold `beta`.
pub fn smooth_l1_value(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("smooth_l1 lengths {} and {}", pred.len(), target.len())));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smooth_l1 beta must be positive, got {beta}")));
    }
    if pred.is_empty() {
        return Err(Error::Shape("smooth_l1 of empty vectors".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e < beta {
                0.5 * e * e / beta
            } else {
                e - 0.5 * beta
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// `(1/M) Σ D(predᵢ, targetᵢ)` over `M` blocks, each given as flat values.
pub fn jepa_loss(predicted: &[Vec<f64>], targets: &[Vec<f64>], beta: f64) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Shape("jepa loss needs at least one block".into()));
    }
    if predicted.len() != targets.len() {
        return Err(Error::Shape(format!("{} predicted blocks for {} targets", predicted.len(), targets.len())));
    }
    let mut sum = 0.0;
    for (p, t) in predicted.iter().zip(targets) {
        sum += smooth_l1_value(p, t, beta)?;
    }
    Ok(sum / predicted.len() as f64)
}
