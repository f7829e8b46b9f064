//! AdamW with decoupled weight decay and a warmup-free cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One AdamW update of `weights` in place. `step` counts from 1.
pub fn adamw_step(
    weights: &mut [f32],
    grads: &[f32],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    params: &AdamWParams,
) -> Result<()> {
    ensure!(
        weights.len() == grads.len() && moments.m.len() == weights.len() && moments.v.len() == weights.len(),
        Dimension,
        "AdamW buffers disagree: w {} g {} m {} v {}",
        weights.len(),
        grads.len(),
        moments.m.len(),
        moments.v.len()
    );
    ensure!(step >= 1, Usage, "AdamW step counter starts at 1");
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient {} at index {i}", grads[i])));
    }
    let (b1, b2) = (params.beta1, params.beta2);
    let bias1 = 1.0 - b1.powi(step as i32);
    let bias2 = 1.0 - b2.powi(step as i32);
    let decay = (1.0 - lr * params.weight_decay) as f32;
    for (((w, &g), m), v) in weights.iter_mut().zip(grads).zip(&mut moments.m).zip(&mut moments.v) {
        *w *= decay;
        *m = (b1 * *m as f64 + (1.0 - b1) * g as f64) as f32;
        *v = (b2 * *v as f64 + (1.0 - b2) * (g as f64) * (g as f64)) as f32;
        let m_hat = *m as f64 / bias1;
        let v_hat = *v as f64 / bias2;
        *w -= (lr * m_hat / (v_hat.sqrt() + params.eps)) as f32;
    }
    Ok(())
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    ensure!(total_steps > 0, Config, "cosine schedule needs at least one step");
    ensure!(step <= total_steps, Usage, "step {step} beyond schedule of {total_steps}");
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
