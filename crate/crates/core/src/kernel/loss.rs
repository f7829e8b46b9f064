//! Reconstruction and distillation losses.

use crate::error::{ensure, Result};
use crate::kernel::{aux_mem, AttentionGeometry};
use crate::tensor::{axpy, dot, Matrix};

/// Probability floor applied inside the logarithm of the KL loss.
pub const KL_EPS: f32 = 1e-9;

/// Mean of squared element differences.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    ensure!(a.shape() == b.shape(), Dimension, "mse of {:?} and {:?}", a.shape(), b.shape());
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_grad(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(a.shape() == b.shape(), Dimension, "mse_grad of {:?} and {:?}", a.shape(), b.shape());
    let scale = 2.0 / a.len().max(1) as f32;
    let mut g = a.sub(b)?;
    g.scale(scale);
    Ok(g)
}

/// Row-wise causal softmax of `QKᵀ/√d` for every query head, materialised
/// as `[n_q_heads × L × L]` (masked cells are exactly zero).
fn attention_probs(q: &Matrix, k: &Matrix, g: &AttentionGeometry) -> Vec<f32> {
    let (l, d) = (q.rows(), g.d_head);
    let scale = 1.0 / (d as f32).sqrt();
    let mut probs = vec![0.0f32; g.n_q_heads * l * l];
    for h in 0..g.n_q_heads {
        let kvh = h / g.gqa_group();
        for i in 0..l {
            let qi = &q.row(i)[h * d..(h + 1) * d];
            let row = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
            let mut max = f32::NEG_INFINITY;
            for (j, p) in row.iter_mut().enumerate().take(i + 1) {
                *p = dot(qi, &k.row(j)[kvh * d..(kvh + 1) * d]) * scale;
                max = max.max(*p);
            }
            let mut z = 0.0f32;
            for p in row.iter_mut().take(i + 1) {
                *p = (*p - max).exp();
                z += *p;
            }
            row.iter_mut().take(i + 1).for_each(|p| *p /= z);
        }
    }
    probs
}

fn check_kl_shapes(q: &Matrix, k_true: &Matrix, k_recon: &Matrix, g: &AttentionGeometry) -> Result<()> {
    g.validate()?;
    ensure!(q.cols() == g.q_width(), Dimension, "query width {} != {}", q.cols(), g.q_width());
    ensure!(
        k_true.shape() == k_recon.shape() && k_true.cols() == g.kv_width() && k_true.rows() == q.rows(),
        Dimension,
        "key shapes {:?} / {:?} for {} queries",
        k_true.shape(),
        k_recon.shape(),
        q.rows()
    );
    Ok(())
}

/// `(1/L) Σᵢ KL(Aᵢ ‖ Ãᵢ)` averaged over query heads, where `A`/`Ã` are
/// the causal attention distributions under the true and reconstructed
/// (post-RoPE) keys. Both full `L × L` probability tensors are held in
/// memory at once.
pub fn qk_kl_loss(q: &Matrix, k_true: &Matrix, k_recon: &Matrix, geometry: &AttentionGeometry) -> Result<f64> {
    qk_kl_impl(q, k_true, k_recon, geometry, false).map(|(loss, _)| loss)
}

/// Loss and its gradient with respect to `k_recon`.
pub fn qk_kl_loss_and_grad(
    q: &Matrix,
    k_true: &Matrix,
    k_recon: &Matrix,
    geometry: &AttentionGeometry,
) -> Result<(f64, Matrix)> {
    qk_kl_impl(q, k_true, k_recon, geometry, true).map(|(loss, g)| (loss, g.expect("gradient requested")))
}

fn qk_kl_impl(
    q: &Matrix,
    k_true: &Matrix,
    k_recon: &Matrix,
    g: &AttentionGeometry,
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    check_kl_shapes(q, k_true, k_recon, g)?;
    let (l, d, heads) = (q.rows(), g.d_head, g.n_q_heads);
    if l == 0 {
        return Ok((0.0, want_grad.then(|| Matrix::zeros(0, g.kv_width()))));
    }
    let _probs_mem = aux_mem::reserve_f32(2 * heads * l * l);
    let target = attention_probs(q, k_true, g);
    let approx = attention_probs(q, k_recon, g);

    let mut total = 0.0f64;
    for h in 0..heads {
        for i in 0..l {
            let base = (h * l + i) * l;
            for j in 0..=i {
                let a = target[base + j];
                if a == 0.0 {
                    continue;
                }
                let at = approx[base + j];
                total += a as f64 * ((a.max(KL_EPS) as f64).ln() - (at.max(KL_EPS) as f64).ln());
            }
        }
    }
    let norm = (l * heads) as f64;
    let loss = total / norm;
    if !want_grad {
        return Ok((loss, None));
    }

    // d/ds̃ⱼ of -Σ Aⱼ log Ãⱼ over cells above the floor.
    let _grad_mem = aux_mem::reserve_f32(g.kv_width() * l + l);
    let scale = 1.0 / (d as f32).sqrt();
    let coef = 1.0 / norm as f32;
    let mut dk = Matrix::zeros(l, g.kv_width());
    let mut ds = vec![0.0f32; l];
    for h in 0..heads {
        let kvh = h / g.gqa_group();
        for i in 0..l {
            let base = (h * l + i) * l;
            let qi = &q.row(i)[h * d..(h + 1) * d];
            let live_mass: f32 = (0..=i).filter(|&j| approx[base + j] >= KL_EPS).map(|j| target[base + j]).sum();
            for j in 0..=i {
                let at = approx[base + j];
                let live = if at >= KL_EPS { target[base + j] } else { 0.0 };
                ds[j] = (at * live_mass - live) * coef * scale;
            }
            for j in 0..=i {
                axpy(ds[j], qi, &mut dk.row_mut(j)[kvh * d..(kvh + 1) * d]);
            }
        }
    }
    Ok((loss, Some(dk)))
}
