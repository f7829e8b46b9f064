//! Causal grouped-query attention.
//!
//! The forward pass streams over key chunks with an online softmax, keeping
//! only per-row running statistics; the backward pass recomputes scores row
//! by row from the saved log-sum-exp. Neither path holds an `L × L` matrix.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::kernel::{aux_mem, fastexp};
use crate::tensor::{axpy, dot, Matrix};

/// Key rows processed per streaming block.
pub const KEY_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionGeometry {
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl AttentionGeometry {
    pub fn new(n_q_heads: usize, n_kv_heads: usize, d_head: usize) -> Result<Self> {
        let g = Self { n_q_heads, n_kv_heads, d_head };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_q_heads > 0 && self.n_kv_heads > 0 && self.d_head > 0,
            Config,
            "attention geometry must be non-empty: {self:?}"
        );
        ensure!(
            self.n_q_heads.is_multiple_of(self.n_kv_heads),
            Config,
            "{} query heads cannot be grouped over {} KV heads",
            self.n_q_heads,
            self.n_kv_heads
        );
        ensure!(self.d_head.is_multiple_of(2), Config, "head dimension {} must be even for RoPE", self.d_head);
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn gqa_group(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.n_q_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    fn scale(&self) -> f32 {
        1.0 / (self.d_head as f32).sqrt()
    }
}

/// Per query head and row log-sum-exp of the scaled scores, `[n_q_heads × L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub lse: Vec<f32>,
}

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix, g: &AttentionGeometry) -> Result<()> {
    g.validate()?;
    ensure!(q.cols() == g.q_width(), Dimension, "query width {} != {}", q.cols(), g.q_width());
    ensure!(k.cols() == g.kv_width(), Dimension, "key width {} != {}", k.cols(), g.kv_width());
    ensure!(v.cols() == g.kv_width(), Dimension, "value width {} != {}", v.cols(), g.kv_width());
    ensure!(
        q.rows() == k.rows() && k.rows() == v.rows(),
        Dimension,
        "row counts differ: q {} k {} v {}",
        q.rows(),
        k.rows(),
        v.rows()
    );
    Ok(())
}

/// One head's columns transposed to `[d_head × L]`, so that per-channel
/// loops run over contiguous token positions.
fn gather_head_t(m: &Matrix, head: usize, d: usize) -> Vec<f32> {
    let l = m.rows();
    let mut out = vec![0.0f32; d * l];
    for r in 0..l {
        for (c, &x) in m.row(r)[head * d..(head + 1) * d].iter().enumerate() {
            out[c * l + r] = x;
        }
    }
    out
}

/// `scores[j] = Σ_c q[c]·scale·kt[c][start + j]`, accumulated channel by
/// channel.
#[inline]
fn scores_into(scores: &mut [f32], q: &[f32], scale: f32, kt: &[f32], l: usize, start: usize) {
    scores.fill(0.0);
    let n = scores.len();
    for (c, &qc) in q.iter().enumerate() {
        let qc = qc * scale;
        let row = &kt[c * l + start..c * l + start + n];
        for (s, &k) in scores.iter_mut().zip(row) {
            *s += qc * k;
        }
    }
}

/// `softmax(QKᵀ/√d)V` per head under a causal mask. `q` is post-RoPE with
/// `n_q_heads` heads; `k` (post-RoPE) and `v` carry `n_kv_heads` heads.
pub fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, geometry: &AttentionGeometry) -> Result<Matrix> {
    causal_attention_with_stats(q, k, v, geometry).map(|(o, _)| o)
}

pub fn causal_attention_with_stats(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    geometry: &AttentionGeometry,
) -> Result<(Matrix, AttentionStats)> {
    check_shapes(q, k, v, geometry)?;
    let (l, d) = (q.rows(), geometry.d_head);
    let scale = geometry.scale();
    let group = geometry.gqa_group();
    let mut out = Matrix::zeros(l, geometry.q_width());
    let mut lse = vec![0.0f32; geometry.n_q_heads * l];
    let _out_mem = aux_mem::reserve_f32(out.len() + lse.len());
    let _scratch = aux_mem::reserve_f32(2 * l * d + KEY_CHUNK + d);

    let mut scores = [0.0f32; KEY_CHUNK];
    let mut acc = vec![0.0f32; d];
    for kvh in 0..geometry.n_kv_heads {
        let kt = gather_head_t(k, kvh, d);
        let vh = v.slice_cols(kvh * d..(kvh + 1) * d).into_vec();
        for qh in kvh * group..(kvh + 1) * group {
            for i in 0..l {
                let qi = &q.row(i)[qh * d..(qh + 1) * d];
                let mut running_max = f32::NEG_INFINITY;
                let mut denom = 0.0f32;
                acc.fill(0.0);
                let mut start = 0;
                while start <= i {
                    let end = (start + KEY_CHUNK).min(i + 1);
                    let block = &mut scores[..end - start];
                    scores_into(block, qi, scale, &kt, l, start);
                    let block_max = block.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let new_max = running_max.max(block_max);
                    if running_max != f32::NEG_INFINITY {
                        let correction = fastexp::exp(running_max - new_max);
                        denom *= correction;
                        acc.iter_mut().for_each(|a| *a *= correction);
                    }
                    fastexp::exp_shifted(block, new_max);
                    denom += block.iter().sum::<f32>();
                    for (&p, vj) in block.iter().zip(vh[start * d..end * d].chunks_exact(d)) {
                        axpy(p, vj, &mut acc);
                    }
                    running_max = new_max;
                    start = end;
                }
                let inv = 1.0 / denom;
                for (o, a) in out.row_mut(i)[qh * d..(qh + 1) * d].iter_mut().zip(&acc) {
                    *o = a * inv;
                }
                lse[qh * l + i] = running_max + denom.ln();
            }
        }
    }
    Ok((out, AttentionStats { lse }))
}

/// Gradients of `⟨upstream, attention(q, k, v)⟩` with respect to `k` and
/// `v` (both in the post-RoPE space that `k` was given in).
pub fn attention_grad_kv(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    upstream: &Matrix,
    geometry: &AttentionGeometry,
) -> Result<(Matrix, Matrix)> {
    let (out, stats) = causal_attention_with_stats(q, k, v, geometry)?;
    attention_grad_kv_with_stats(q, k, v, &out, &stats, upstream, geometry)
}

/// As [`attention_grad_kv`], reusing a forward pass's output and stats.
pub fn attention_grad_kv_with_stats(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    out: &Matrix,
    stats: &AttentionStats,
    upstream: &Matrix,
    geometry: &AttentionGeometry,
) -> Result<(Matrix, Matrix)> {
    check_shapes(q, k, v, geometry)?;
    ensure!(
        upstream.shape() == (q.rows(), geometry.q_width()),
        Dimension,
        "upstream {:?} does not match attention output {:?}",
        upstream.shape(),
        (q.rows(), geometry.q_width())
    );
    ensure!(out.shape() == upstream.shape(), Dimension, "forward output shape {:?}", out.shape());
    let (l, d) = (q.rows(), geometry.d_head);
    ensure!(stats.lse.len() == geometry.n_q_heads * l, Dimension, "stats length {}", stats.lse.len());
    let scale = geometry.scale();
    let group = geometry.gqa_group();

    let mut dk = Matrix::zeros(l, geometry.kv_width());
    let mut dv = Matrix::zeros(l, geometry.kv_width());
    let _grad_mem = aux_mem::reserve_f32(dk.len() + dv.len());
    let _scratch = aux_mem::reserve_f32(4 * l * d + 2 * l);

    // Per-row probability and score-gradient buffers; O(L) each.
    let mut p = vec![0.0f32; l];
    let mut ds = vec![0.0f32; l];
    for kvh in 0..geometry.n_kv_heads {
        let kt = gather_head_t(k, kvh, d);
        let vt = gather_head_t(v, kvh, d);
        let mut dkt = vec![0.0f32; d * l];
        let mut dvt = vec![0.0f32; d * l];
        for qh in kvh * group..(kvh + 1) * group {
            for i in 0..l {
                let gi = &upstream.row(i)[qh * d..(qh + 1) * d];
                if gi.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let qi = &q.row(i)[qh * d..(qh + 1) * d];
                let delta = dot(gi, &out.row(i)[qh * d..(qh + 1) * d]);
                let lse_i = stats.lse[qh * l + i];
                let n = i + 1;
                let (p, ds) = (&mut p[..n], &mut ds[..n]);
                scores_into(p, qi, scale, &kt, l, 0);
                fastexp::exp_shifted(p, lse_i);
                // ds temporarily holds dP = g·v_j.
                ds.fill(0.0);
                for (c, &gc) in gi.iter().enumerate() {
                    for (acc, &vj) in ds.iter_mut().zip(&vt[c * l..c * l + n]) {
                        *acc += gc * vj;
                    }
                }
                for (s, &pj) in ds.iter_mut().zip(p.iter()) {
                    *s = pj * (*s - delta) * scale;
                }
                for c in 0..d {
                    let (gc, qc) = (gi[c], qi[c]);
                    for (dst, &pj) in dvt[c * l..c * l + n].iter_mut().zip(p.iter()) {
                        *dst += pj * gc;
                    }
                    for (dst, &sj) in dkt[c * l..c * l + n].iter_mut().zip(ds.iter()) {
                        *dst += sj * qc;
                    }
                }
            }
        }
        for r in 0..l {
            for c in 0..d {
                dk.set(r, kvh * d + c, dkt[c * l + r]);
                dv.set(r, kvh * d + c, dvt[c * l + r]);
            }
        }
    }
    Ok((dk, dv))
}

/// Attention output for one query row over every row of `k`/`v`; the
/// decode-time path where the query is the newest token.
pub fn attend_row(q_row: &[f32], k: &Matrix, v: &Matrix, geometry: &AttentionGeometry) -> Result<Vec<f32>> {
    ensure!(q_row.len() == geometry.q_width(), Dimension, "query row width {}", q_row.len());
    ensure!(
        k.cols() == geometry.kv_width() && v.cols() == geometry.kv_width() && k.rows() == v.rows(),
        Dimension,
        "cache shapes k {:?} v {:?}",
        k.shape(),
        v.shape()
    );
    ensure!(k.rows() > 0, Input, "attention over an empty cache");
    let d = geometry.d_head;
    let scale = geometry.scale();
    let group = geometry.gqa_group();
    let mut out = vec![0.0f32; geometry.q_width()];
    let mut scores = vec![0.0f32; k.rows()];
    for qh in 0..geometry.n_q_heads {
        let kvh = qh / group;
        let qi = &q_row[qh * d..(qh + 1) * d];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qi, &k.row(j)[kvh * d..(kvh + 1) * d]) * scale;
            max = max.max(*s);
        }
        let mut denom = 0.0f32;
        let o = &mut out[qh * d..(qh + 1) * d];
        for (j, s) in scores.iter().enumerate() {
            let p = fastexp::exp(s - max);
            denom += p;
            axpy(p, &v.row(j)[kvh * d..(kvh + 1) * d], o);
        }
        let inv = 1.0 / denom;
        o.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Dense float64 reference: materialises every score row.
    fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, g: &AttentionGeometry) -> Vec<f64> {
        let (l, d) = (q.rows(), g.d_head);
        let mut out = vec![0.0f64; l * g.q_width()];
        for h in 0..g.n_q_heads {
            let kvh = h / g.gqa_group();
            for i in 0..l {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..d).map(|c| q.get(i, h * d + c) as f64 * k.get(j, kvh * d + c) as f64).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for c in 0..d {
                    out[i * g.q_width() + h * d + c] = scores
                        .iter()
                        .enumerate()
                        .map(|(j, s)| (s - max).exp() / z * v.get(j, kvh * d + c) as f64)
                        .sum();
                }
            }
        }
        out
    }

    fn random_qkv(seed: u64, l: usize, g: &AttentionGeometry) -> (Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Matrix::randn(l, g.q_width(), 1.0, &mut rng),
            Matrix::randn(l, g.kv_width(), 1.0, &mut rng),
            Matrix::randn(l, g.kv_width(), 1.0, &mut rng),
        )
    }

    #[test]
    fn single_token_returns_its_value() {
        let g = AttentionGeometry::new(4, 2, 2).unwrap();
        let (q, k, v) = random_qkv(1, 1, &g);
        let o = causal_attention(&q, &k, &v, &g).unwrap();
        for h in 0..4 {
            let kvh = h / 2;
            assert_eq!(&o.row(0)[h * 2..h * 2 + 2], &v.row(0)[kvh * 2..kvh * 2 + 2]);
        }
    }

    #[test]
    fn identical_keys_average_prefix_values() {
        let g = AttentionGeometry::new(1, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Matrix::randn(6, 4, 1.0, &mut rng);
        let krow = [0.4f32, -0.2, 1.0, 0.3];
        let k = Matrix::from_rows(&[krow; 6]);
        let v = Matrix::randn(6, 4, 1.0, &mut rng);
        let o = causal_attention(&q, &k, &v, &g).unwrap();
        for i in 0..6 {
            for c in 0..4 {
                let mean = (0..=i).map(|j| v.get(j, c)).sum::<f32>() / (i + 1) as f32;
                assert!((o.get(i, c) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn seed_42_matches_dense_reference() {
        let g = AttentionGeometry::new(1, 1, 2).unwrap();
        let (q, k, v) = random_qkv(42, 4, &g);
        let o = causal_attention(&q, &k, &v, &g).unwrap();
        let want = naive_attention(&q, &k, &v, &g);
        for (a, b) in o.as_slice().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn matches_dense_reference_over_many_seeds() {
        for seed in 0..100u64 {
            let l = 1 + (seed as usize * 7) % 16;
            let d = [2, 4, 6, 8][seed as usize % 4];
            let g = AttentionGeometry::new(4, [1, 2, 4][seed as usize % 3], d).unwrap();
            let (q, k, v) = random_qkv(seed, l, &g);
            let o = causal_attention(&q, &k, &v, &g).unwrap();
            let want = naive_attention(&q, &k, &v, &g);
            let err = o.as_slice().iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn chunk_boundaries_agree_with_reference() {
        let g = AttentionGeometry::new(2, 1, 4).unwrap();
        let (q, k, v) = random_qkv(9, KEY_CHUNK * 2 + 5, &g);
        let o = causal_attention(&q, &k, &v, &g).unwrap();
        let want = naive_attention(&q, &k, &v, &g);
        let err = o.as_slice().iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4);
    }

    #[test]
    fn attend_row_matches_last_causal_row() {
        let g = AttentionGeometry::new(4, 2, 4).unwrap();
        let (q, k, v) = random_qkv(5, 10, &g);
        let o = causal_attention(&q, &k, &v, &g).unwrap();
        let last = attend_row(q.row(9), &k, &v, &g).unwrap();
        for (a, b) in o.row(9).iter().zip(&last) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let g = AttentionGeometry::new(2, 1, 2).unwrap();
        let (q, k, v) = random_qkv(4, 5, &g);
        let up = Matrix::zeros(5, g.q_width());
        let (dk, dv) = attention_grad_kv(&q, &k, &v, &up, &g).unwrap();
        assert!(dk.as_slice().iter().all(|&x| x == 0.0));
        assert!(dv.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_gradients() {
        let g = AttentionGeometry::new(1, 1, 2).unwrap();
        let (q, k, v) = random_qkv(8, 1, &g);
        let up = Matrix::from_rows(&[[0.7f32, -1.3]]);
        let (dk, dv) = attention_grad_kv(&q, &k, &v, &up, &g).unwrap();
        assert!(dk.as_slice().iter().all(|&x| x.abs() < 1e-7));
        assert_eq!(dv.row(0), up.row(0));
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let g = AttentionGeometry::new(2, 1, 2).unwrap();
        let (q, k, v) = random_qkv(1, 3, &g);
        let bad = AttentionGeometry::new(2, 2, 2).unwrap();
        assert!(matches!(causal_attention(&q, &k, &v, &bad), Err(crate::Error::Dimension(_))));
        assert!(AttentionGeometry::new(3, 2, 2).is_err());
    }
}
