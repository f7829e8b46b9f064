//! Double-precision reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;

/// Row-major f64 matrix, deliberately independent of the crate's tensor.
#[derive(Clone, Debug)]
pub struct M64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl M64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_f32(rows: usize, cols: usize, xs: &[f32]) -> Self {
        assert_eq!(xs.len(), rows * cols);
        Self { rows, cols, data: xs.iter().map(|&x| x as f64).collect() }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `x · wᵀ`.
pub fn linear(x: &M64, w: &M64) -> M64 {
    assert_eq!(x.cols, w.cols);
    let mut out = M64::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        for o in 0..w.rows {
            *out.at_mut(i, o) = (0..x.cols).map(|c| x.at(i, c) * w.at(o, c)).sum();
        }
    }
    out
}

/// Consecutive-pair rotary embedding, angle `pos · base^(-2i/d)`.
pub fn rope(x: &M64, d_head: usize, base: f64) -> M64 {
    let mut out = x.clone();
    for r in 0..x.rows {
        for h in 0..x.cols / d_head {
            for i in 0..d_head / 2 {
                let theta = r as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
                let (c0, c1) = (h * d_head + 2 * i, h * d_head + 2 * i + 1);
                let (a, b) = (x.at(r, c0), x.at(r, c1));
                *out.at_mut(r, c0) = a * theta.cos() - b * theta.sin();
                *out.at_mut(r, c1) = a * theta.sin() + b * theta.cos();
            }
        }
    }
    out
}

/// Causal attention probabilities `[head][i][j]` (zero above the diagonal).
pub fn probs(q: &M64, k: &M64, n_q: usize, n_kv: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    let l = q.rows;
    let scale = 1.0 / (d as f64).sqrt();
    (0..n_q)
        .map(|h| {
            let kvh = h / (n_q / n_kv);
            (0..l)
                .map(|i| {
                    let s: Vec<f64> = (0..=i)
                        .map(|j| (0..d).map(|c| q.at(i, h * d + c) * k.at(j, kvh * d + c)).sum::<f64>() * scale)
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    let mut row = vec![0.0; l];
                    for (j, x) in s.iter().enumerate() {
                        row[j] = (x - m).exp() / z;
                    }
                    row
                })
                .collect()
        })
        .collect()
}

pub fn attention(q: &M64, k: &M64, v: &M64, n_q: usize, n_kv: usize, d: usize) -> M64 {
    let p = probs(q, k, n_q, n_kv, d);
    let mut out = M64::zeros(q.rows, n_q * d);
    for h in 0..n_q {
        let kvh = h / (n_q / n_kv);
        for i in 0..q.rows {
            for c in 0..d {
                *out.at_mut(i, h * d + c) = (0..=i).map(|j| p[h][i][j] * v.at(j, kvh * d + c)).sum();
            }
        }
    }
    out
}

pub fn mse(a: &M64, b: &M64) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64
}

/// Mean over query heads and rows of `KL(A_true ‖ A_recon)`, with the
/// reconstructed probabilities floored at `eps` inside the logarithm.
pub fn kl(q: &M64, k_true: &M64, k_recon: &M64, n_q: usize, n_kv: usize, d: usize, eps: f64) -> f64 {
    let a = probs(q, k_true, n_q, n_kv, d);
    let b = probs(q, k_recon, n_q, n_kv, d);
    let mut total = 0.0;
    for h in 0..n_q {
        for i in 0..q.rows {
            for j in 0..=i {
                if a[h][i][j] > 0.0 {
                    total += a[h][i][j] * (a[h][i][j].max(eps).ln() - b[h][i][j].max(eps).ln());
                }
            }
        }
    }
    total / (q.rows * n_q) as f64
}

/// Central difference of `f` along every element of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, with `b` the reference.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}
