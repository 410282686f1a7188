use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators of one tensor and its own step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Moments for every shared tensor and every task's exclusive tensors.
///
/// Exclusive moments only advance on steps that draw their task, so each
/// tensor keeps its own counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub shared: BTreeMap<String, Moments>,
    pub exclusive: Vec<BTreeMap<String, Moments>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn shared_entry(&mut self, name: &str, len: usize) -> &mut Moments {
        self.shared
            .entry(name.to_string())
            .or_insert_with(|| Moments::new(len))
    }

    pub(crate) fn exclusive_entry(&mut self, task: usize, name: &str, len: usize) -> &mut Moments {
        if self.exclusive.len() < task {
            self.exclusive.resize_with(task, BTreeMap::new);
        }
        self.exclusive[task - 1]
            .entry(name.to_string())
            .or_insert_with(|| Moments::new(len))
    }
}

/// One bias-corrected Adam update of `tensor` in place.
///
/// A non-finite gradient aborts before anything is modified.
pub fn adam_step(
    tensor: &mut [f32],
    grad: &[f32],
    moments: &mut Moments,
    config: &AdamConfig,
) -> Result<()> {
    if tensor.len() != grad.len() {
        return Err(Error::shape(tensor.len(), grad.len()));
    }
    if moments.m.len() != tensor.len() || moments.v.len() != tensor.len() {
        return Err(Error::shape(tensor.len(), moments.m.len()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {i}")));
    }
    moments.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(moments.step as i32);
    let c2 = 1.0 - b2.powi(moments.step as i32);
    for ((w, g), (m, v)) in tensor
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        let g = *g as f64;
        let m_new = b1 * *m as f64 + (1.0 - b1) * g;
        let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = m_new as f32;
        *v = v_new as f32;
        let update = config.learning_rate * (m_new / c1) / ((v_new / c2).sqrt() + config.eps);
        *w = (*w as f64 - update) as f32;
    }
    Ok(())
}
