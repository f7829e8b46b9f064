//! Rotary position embeddings over consecutive channel pairs.

use crate::error::{ensure, Result};
use crate::kernel::AttentionGeometry;
use crate::tensor::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotates each `(2i, 2i+1)` channel pair of every head by
/// `position * base^(-2i/d_head)`. `x` may carry query or KV heads.
pub fn rope_apply(x: &Matrix, positions: &[usize], geometry: &AttentionGeometry, base: f64) -> Result<Matrix> {
    let signed: Vec<i64> = positions.iter().map(|&p| p as i64).collect();
    rope_apply_signed(x, &signed, geometry, base)
}

/// Undoes [`rope_apply`]; also the adjoint used to pull gradients back to
/// pre-rotation space.
pub fn rope_inverse(x: &Matrix, positions: &[usize], geometry: &AttentionGeometry, base: f64) -> Result<Matrix> {
    let signed: Vec<i64> = positions.iter().map(|&p| -(p as i64)).collect();
    rope_apply_signed(x, &signed, geometry, base)
}

pub fn rope_apply_signed(x: &Matrix, positions: &[i64], geometry: &AttentionGeometry, base: f64) -> Result<Matrix> {
    let d = geometry.d_head;
    ensure!(d.is_multiple_of(2) && d > 0, Config, "RoPE needs an even head dimension, got {d}");
    ensure!(
        x.cols() == geometry.q_width() || x.cols() == geometry.kv_width(),
        Dimension,
        "RoPE input width {} is neither {} nor {}",
        x.cols(),
        geometry.q_width(),
        geometry.kv_width()
    );
    ensure!(
        positions.len() == x.rows(),
        Dimension,
        "{} positions for {} rows",
        positions.len(),
        x.rows()
    );
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect();
    let mut out = x.clone();
    let mut cos = vec![0.0f32; half];
    let mut sin = vec![0.0f32; half];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let angle = pos as f64 * inv_freq[i];
            cos[i] = angle.cos() as f32;
            sin[i] = angle.sin() as f32;
        }
        for head in out.row_mut(r).chunks_exact_mut(d) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos[i] - b * sin[i];
                head[2 * i + 1] = a * sin[i] + b * cos[i];
            }
        }
    }
    Ok(out)
}
