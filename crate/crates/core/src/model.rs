//! A small, randomly initialised grouped-query transformer.
//!
//! The model is frozen: it exists to produce realistic per-layer key/value
//! streams (with the correlations a shared residual stream induces) and to
//! run decode steps against different cache backends. Keys are always
//! handed out *before* rotary embedding; rotation happens at attention time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::echo::CacheHandle;
use crate::error::{ensure, Result};
use crate::kernel::{attend_row, causal_attention, rope_apply, AttentionGeometry, DEFAULT_ROPE_BASE};
use crate::tensor::{matmul, Matrix};

const INIT_STD: f32 = 0.02;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub geometry: AttentionGeometry,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seed: u64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    /// Desk geometry: 8 layers, 8 query heads over 4 KV heads of width 16.
    fn default() -> Self {
        Self {
            n_layers: 8,
            geometry: AttentionGeometry { n_q_heads: 8, n_kv_heads: 4, d_head: 16 },
            d_model: 128,
            d_ff: 256,
            vocab: 256,
            seed: 0,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        ensure!(self.n_layers > 0, Config, "model needs at least one layer");
        ensure!(
            self.d_model == self.geometry.q_width(),
            Config,
            "d_model {} must equal n_q_heads x d_head = {}",
            self.d_model,
            self.geometry.q_width()
        );
        ensure!(self.vocab > 0 && self.d_ff > 0, Config, "vocab and d_ff must be positive");
        ensure!(self.rope_base > 1.0, Config, "rope base {} must exceed 1", self.rope_base);
        Ok(())
    }

    /// Width of one layer's key (or value) cache row.
    pub fn d_kv(&self) -> usize {
        self.geometry.kv_width()
    }
}

/// One layer's cache: pre-RoPE keys and values, `[tokens × n_kv_heads·d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    pub layer: usize,
    pub k: Matrix,
    pub v: Matrix,
}

impl LayerKV {
    pub fn new(layer: usize, k: Matrix, v: Matrix) -> Result<Self> {
        ensure!(k.shape() == v.shape(), Dimension, "key {:?} and value {:?} shapes differ", k.shape(), v.shape());
        Ok(Self { layer, k, v })
    }

    pub fn tokens(&self) -> usize {
        self.k.rows()
    }
}

/// Everything one layer produced during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Post-RoPE queries, `[tokens × n_q_heads·d_head]`.
    pub q: Matrix,
    pub kv: LayerKV,
    /// Attention output before the output projection.
    pub attn_out: Matrix,
    /// Residual stream after the layer.
    pub hidden: Matrix,
}

#[derive(Debug, Clone)]
pub struct TraceBatch {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    pub logits: Matrix,
}

impl TraceBatch {
    pub fn layer_kvs(&self) -> Vec<LayerKV> {
        self.layers.iter().map(|l| l.kv.clone()).collect()
    }
}

/// Rewrites a layer's keys/values before attention reads them. Used to run
/// a whole-sequence forward pass through a compressed cache.
pub trait KvTransform {
    fn transform(&mut self, kv: LayerKV) -> Result<LayerKV>;
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    lm_head: Matrix,
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn row_matrix(row: &[f32]) -> Matrix {
    Matrix::from_vec(1, row.len(), row.to_vec()).expect("row shape")
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (dm, dkv, dff) = (config.d_model, config.d_kv(), config.d_ff);
        let embed = Matrix::randn(config.vocab, dm, INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: Matrix::randn(dm, config.geometry.q_width(), INIT_STD, &mut rng),
                wk: Matrix::randn(dm, dkv, INIT_STD, &mut rng),
                wv: Matrix::randn(dm, dkv, INIT_STD, &mut rng),
                wo: Matrix::randn(config.geometry.q_width(), dm, INIT_STD, &mut rng),
                w_up: Matrix::randn(dm, dff, INIT_STD, &mut rng),
                w_down: Matrix::randn(dff, dm, INIT_STD, &mut rng),
            })
            .collect();
        let lm_head = Matrix::randn(dm, config.vocab, INIT_STD, &mut rng);
        Ok(Self { config, embed, layers, lm_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Hash of the first layer's query projection.
    pub fn first_layer_checksum(&self) -> String {
        self.layers[0].wq.checksum()
    }

    /// Hash over every weight, in initialisation order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.embed.checksum());
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down] {
                h.update(m.checksum());
            }
        }
        h.update(self.lm_head.checksum());
        hex::encode(h.finalize())
    }

    /// First-layer query projection; exposed for statistical checks on the
    /// initialiser.
    pub fn first_layer_query_weights(&self) -> &Matrix {
        &self.layers[0].wq
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        ensure!(!tokens.is_empty(), Input, "empty token sequence");
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(crate::Error::Input(format!("token {t} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    fn embed_tokens(&self, tokens: &[u32]) -> Matrix {
        let mut x = Matrix::zeros(tokens.len(), self.config.d_model);
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.embed.row(t as usize));
        }
        x
    }

    fn mlp(&self, w: &LayerWeights, x: &Matrix) -> Result<Matrix> {
        let up = matmul(&rms_norm(x), &w.w_up)?.map(silu);
        matmul(&up, &w.w_down)
    }

    /// Full forward pass over `tokens` with an uncompressed cache.
    pub fn prefill(&self, tokens: &[u32]) -> Result<TraceBatch> {
        self.forward_with(tokens, None)
    }

    /// Forward pass in which attention reads the cache as rewritten by
    /// `transform`. The recorded trace holds the keys/values each layer
    /// actually produced.
    pub fn forward_with(&self, tokens: &[u32], mut transform: Option<&mut dyn KvTransform>) -> Result<TraceBatch> {
        self.check_tokens(tokens)?;
        let g = &self.config.geometry;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x = self.embed_tokens(tokens);
        let mut traces = Vec::with_capacity(self.layers.len());
        for (layer, w) in self.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q = rope_apply(&matmul(&h, &w.wq)?, &positions, g, self.config.rope_base)?;
            let kv = LayerKV::new(layer, matmul(&h, &w.wk)?, matmul(&h, &w.wv)?)?;
            let attn_out = match transform.as_deref_mut() {
                Some(t) => {
                    let seen = t.transform(kv.clone())?;
                    ensure!(
                        seen.k.shape() == kv.k.shape(),
                        Dimension,
                        "transform changed cache shape at layer {layer}"
                    );
                    let k_rot = rope_apply(&seen.k, &positions, g, self.config.rope_base)?;
                    causal_attention(&q, &k_rot, &seen.v, g)?
                }
                None => {
                    let k_rot = rope_apply(&kv.k, &positions, g, self.config.rope_base)?;
                    causal_attention(&q, &k_rot, &kv.v, g)?
                }
            };
            x.add_assign(&matmul(&attn_out, &w.wo)?)?;
            x.add_assign(&self.mlp(w, &x)?)?;
            traces.push(LayerTrace { q, kv, attn_out, hidden: x.clone() });
        }
        let logits = matmul(&rms_norm(&x), &self.lm_head)?;
        Ok(TraceBatch { tokens: tokens.to_vec(), layers: traces, logits })
    }

    /// Runs one token through the model against `cache`, appending that
    /// token's keys/values per the backend's policy. Returns the logits.
    pub fn decode_step(&self, cache: &mut CacheHandle, token: u32) -> Result<Vec<f32>> {
        self.check_tokens(&[token])?;
        ensure!(
            cache.n_layers() == self.config.n_layers && cache.d_kv() == self.config.d_kv(),
            Config,
            "cache geometry ({} layers, width {}) does not match model ({} layers, width {})",
            cache.n_layers(),
            cache.d_kv(),
            self.config.n_layers,
            self.config.d_kv()
        );
        let g = &self.config.geometry;
        let pos = cache.tokens();
        let mut x = self.embed_tokens(&[token]);
        let all_positions: Vec<usize> = (0..=pos).collect();
        for (layer, w) in self.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q = rope_apply(&matmul(&h, &w.wq)?, &[pos], g, self.config.rope_base)?;
            let k = matmul(&h, &w.wk)?;
            let v = matmul(&h, &w.wv)?;
            cache.append(layer, k.row(0), v.row(0))?;
            let full = cache.read_layer(layer)?;
            ensure!(full.tokens() == pos + 1, Usage, "layer {layer} holds {} rows at position {pos}", full.tokens());
            let k_rot = rope_apply(&full.k, &all_positions, g, self.config.rope_base)?;
            let attn = row_matrix(&attend_row(q.row(0), &k_rot, &full.v, g)?);
            x.add_assign(&matmul(&attn, &w.wo)?)?;
            x.add_assign(&self.mlp(w, &x)?)?;
        }
        let logits = matmul(&rms_norm(&x), &self.lm_head)?;
        Ok(logits.into_vec())
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            geometry: AttentionGeometry { n_q_heads: 4, n_kv_heads: 2, d_head: 8 },
            d_model: 32,
            d_ff: 64,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::init(small_config(1)).unwrap();
        let b = Model::init(small_config(1)).unwrap();
        let c = Model::init(small_config(2)).unwrap();
        assert_eq!(a.first_layer_checksum(), b.first_layer_checksum());
        assert_ne!(a.first_layer_checksum(), c.first_layer_checksum());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn inconsistent_geometry_rejected() {
        let mut cfg = small_config(0);
        cfg.d_model = 30;
        assert!(matches!(Model::init(cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn one_token_gives_one_row_everywhere() {
        let m = Model::init(small_config(0)).unwrap();
        let t = m.prefill(&[42]).unwrap();
        assert!(t.layers.iter().all(|l| l.kv.tokens() == 1 && l.q.rows() == 1));
        assert_eq!(t.logits.shape(), (1, 256));
    }

    #[test]
    fn empty_and_out_of_vocab_rejected() {
        let m = Model::init(small_config(0)).unwrap();
        assert!(matches!(m.prefill(&[]), Err(crate::Error::Input(_))));
        assert!(matches!(m.prefill(&[300]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn layer_zero_keys_are_position_free() {
        let m = Model::init(small_config(0)).unwrap();
        let t = m.prefill(&[7, 1, 2, 3, 4, 7, 9]).unwrap();
        let k = &t.layers[0].kv.k;
        assert_eq!(k.row(0), k.row(5));
    }
}
