use serde::{Deserialize, Serialize};

use crate::diffusion::ImageTensor;
use crate::{Error, Result};

/// Noise-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Mse,
}

/// Mean over all elements of `(eps - eps_pred)^2`.
pub fn loss_mse(eps: &ImageTensor, eps_pred: &ImageTensor) -> Result<f64> {
    if eps.shape() != eps_pred.shape() {
        return Err(Error::shape(eps.shape(), eps_pred.shape()));
    }
    let sum: f64 = eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    Ok(sum / eps.data().len() as f64)
}
