//! Hybrid compression: structured channel pruning for keys, echo
//! reconstruction for values.
//!
//! Key channels are ranked per layer by a calibration score (query-weighted
//! key energy) and the lowest-scoring ones are dropped for every token.
//! Attention reads pruned keys zero-filled. Values go through the usual
//! echo store, so only a value predictor is needed.

use crate::echo::{EchoConfig, EchoStore, KvKind, Reconstructor};
use crate::error::{ensure, Error, Result};
use crate::kernel::{mse, AttentionGeometry};
use crate::model::{KvTransform, LayerKV, Model};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConfig {
    /// Fraction of key channels kept, in `(0, 1]`.
    pub key_keep_ratio: f64,
    /// Echo settings applied to values.
    pub value: EchoConfig,
    /// Per-layer key-channel scores, each of length `d_kv`.
    pub scores: Vec<Vec<f32>>,
}

impl HybridConfig {
    pub fn new(key_keep_ratio: f64, value: EchoConfig, scores: Vec<Vec<f32>>) -> Result<Self> {
        let cfg = Self { key_keep_ratio, value, scores };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_keep_ratio(self.key_keep_ratio)?;
        self.value.validate()?;
        ensure!(
            self.scores.iter().all(|s| s.len() == self.value.d_kv),
            Config,
            "channel scores must have length {}",
            self.value.d_kv
        );
        Ok(())
    }

    pub fn kept_channels(&self) -> usize {
        kept_count(self.key_keep_ratio, self.value.d_kv)
    }

    /// Overall ratio: keys and values are half the cache each.
    pub fn overall_ratio(&self) -> f64 {
        blended_ratio(self.key_keep_ratio, self.value.compute_ratio())
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        ensure!(
            self.value.d_kv == cfg.d_kv(),
            Config,
            "hybrid value config width {} does not match model width {}",
            self.value.d_kv,
            cfg.d_kv()
        );
        ensure!(
            self.scores.len() == cfg.n_layers,
            Config,
            "{} score vectors for a {}-layer model",
            self.scores.len(),
            cfg.n_layers
        );
        self.value.validate_for(cfg.n_layers)
    }
}

/// `(r_k + r_v) / 2`. Key-only compression at `r` therefore reports
/// `(r + 1) / 2`.
pub fn blended_ratio(key_ratio: f64, value_ratio: f64) -> f64 {
    (key_ratio + value_ratio) / 2.0
}

fn check_keep_ratio(r: f64) -> Result<()> {
    ensure!(r > 0.0 && r <= 1.0, Config, "key keep ratio {r} must lie in (0, 1]");
    Ok(())
}

/// `⌈r · d_kv⌉`.
pub fn kept_count(ratio: f64, d_kv: usize) -> usize {
    ((ratio * d_kv as f64).ceil() as usize).min(d_kv)
}

/// The `n` highest-scoring channels, ties to the lower index, returned in
/// ascending channel order.
pub fn select_channels(scores: &[f32], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..n.min(scores.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Keys with a fixed subset of channels stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedKeys {
    d_kv: usize,
    kept: Vec<usize>,
    /// Bit `c` (LSB-first within each byte) set iff channel `c` is kept.
    bitmap: Vec<u8>,
    data: Matrix,
}

impl PrunedKeys {
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn bitmap(&self) -> &[u8] {
        &self.bitmap
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    /// Stored bytes: kept channels as f32 plus the channel bitmap.
    pub fn bytes(&self) -> usize {
        self.data.len() * 4 + self.bitmap.len()
    }

    /// Full-width keys with pruned channels set to zero.
    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.data.rows(), self.d_kv);
        for r in 0..out.rows() {
            let src = self.data.row(r);
            let dst = out.row_mut(r);
            for (&c, &x) in self.kept.iter().zip(src) {
                dst[c] = x;
            }
        }
        out
    }
}

pub fn prune_keys(k: &Matrix, scores: &[f32], key_keep_ratio: f64) -> Result<PrunedKeys> {
    check_keep_ratio(key_keep_ratio)?;
    let d_kv = k.cols();
    ensure!(scores.len() == d_kv, Dimension, "{} scores for {d_kv} channels", scores.len());
    let kept = select_channels(scores, kept_count(key_keep_ratio, d_kv));
    let mut bitmap = vec![0u8; d_kv.div_ceil(8)];
    for &c in &kept {
        bitmap[c / 8] |= 1 << (c % 8);
    }
    let mut data = Matrix::zeros(k.rows(), kept.len());
    for r in 0..k.rows() {
        let src = k.row(r);
        for (dst, &c) in data.row_mut(r).iter_mut().zip(&kept) {
            *dst = src[c];
        }
    }
    Ok(PrunedKeys { d_kv, kept, bitmap, data })
}

/// Query-weighted key energy of one layer over several sequences, given as
/// `(pre-RoPE keys, queries)` pairs: for channel `c`, the mean over tokens
/// of `K[t,c]²` times the mean over tokens and over the query heads sharing
/// `c`'s KV head of `Q[t,·]²` at the same within-head offset.
pub fn channel_scores(samples: &[(&Matrix, &Matrix)], g: &AttentionGeometry) -> Result<Vec<f32>> {
    ensure!(!samples.is_empty(), Input, "key-channel calibration needs at least one sequence");
    let d_kv = g.kv_width();
    let group = g.gqa_group();
    // Per-sequence partial sums, combined in sorted order so the result
    // does not depend on the order of the sequences.
    let mut key_parts = vec![Vec::with_capacity(samples.len()); d_kv];
    let mut query_parts = vec![Vec::with_capacity(samples.len()); d_kv];
    let mut tokens = 0usize;
    for (k, q) in samples {
        ensure!(
            k.cols() == d_kv && q.cols() == g.q_width() && k.rows() == q.rows(),
            Dimension,
            "calibration shapes k {:?} q {:?}",
            k.shape(),
            q.shape()
        );
        tokens += k.rows();
        for c in 0..d_kv {
            let (kvh, off) = (c / g.d_head, c % g.d_head);
            let ks: f64 = (0..k.rows()).map(|t| (k.get(t, c) as f64).powi(2)).sum();
            let qs: f64 = (kvh * group..(kvh + 1) * group)
                .flat_map(|h| (0..q.rows()).map(move |t| (t, h * g.d_head + off)))
                .map(|(t, col)| (q.get(t, col) as f64).powi(2))
                .sum();
            key_parts[c].push(ks);
            query_parts[c].push(qs);
        }
    }
    ensure!(tokens > 0, Input, "calibration sequences are empty");
    let ordered_sum = |parts: &mut Vec<f64>| {
        parts.sort_by(f64::total_cmp);
        parts.iter().sum::<f64>()
    };
    let n = tokens as f64;
    Ok((0..d_kv)
        .map(|c| {
            let k2 = ordered_sum(&mut key_parts[c]) / n;
            let q2 = ordered_sum(&mut query_parts[c]) / (n * group as f64);
            (k2 * q2) as f32
        })
        .collect())
}

/// Per-layer key-channel scores ([`channel_scores`]) from the first
/// `samples` sequences of `corpus`.
pub fn calibrate_key_channels(model: &Model, corpus: &[Vec<u32>], samples: usize) -> Result<Vec<Vec<f32>>> {
    let used = &corpus[..samples.min(corpus.len())];
    ensure!(!used.is_empty(), Input, "key-channel calibration needs at least one sequence");
    let traces = used.iter().map(|seq| model.prefill(seq)).collect::<Result<Vec<_>>>()?;
    (0..model.config().n_layers)
        .map(|l| {
            let pairs: Vec<(&Matrix, &Matrix)> = traces.iter().map(|t| (&t.layers[l].kv.k, &t.layers[l].q)).collect();
            channel_scores(&pairs, &model.config().geometry)
        })
        .collect()
}

/// Forward hook: prunes keys of every layer and echo-compresses values.
pub struct HybridTransform<'a> {
    config: &'a HybridConfig,
    values: EchoStore,
    recon: &'a dyn Reconstructor,
    key_bytes: usize,
}

impl<'a> HybridTransform<'a> {
    pub fn new(config: &'a HybridConfig, n_layers: usize, recon: &'a dyn Reconstructor) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, values: EchoStore::new(config.value, n_layers)?, recon, key_bytes: 0 })
    }

    /// Bytes of the pruned keys plus the echo-stored values.
    pub fn bytes(&self) -> usize {
        // The value store also carries keys with the same layout; values
        // are exactly half of it.
        self.key_bytes + self.values.compute_bytes().total / 2
    }
}

impl KvTransform for HybridTransform<'_> {
    fn transform(&mut self, kv: LayerKV) -> Result<LayerKV> {
        let layer = kv.layer;
        let scores = self
            .config
            .scores
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no channel scores for layer {layer}")))?;
        let pruned = prune_keys(&kv.k, scores, self.config.key_keep_ratio)?;
        self.key_bytes += pruned.bytes();
        let k = pruned.to_dense();
        self.values.push_layer(kv)?;
        let v = self.values.read_kind(layer, KvKind::Value, self.recon)?;
        Ok(LayerKV { layer, k, v })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutput {
    pub logits: Matrix,
    /// Per-layer MSE of the attention output against the full-cache pass.
    pub layer_output_mse: Vec<f64>,
    pub logit_mse: f64,
    pub bytes: usize,
    pub full_bytes: usize,
}

/// Runs `tokens` with hybrid-compressed caches and compares against the
/// full-cache forward pass.
pub fn hybrid_forward(
    model: &Model,
    tokens: &[u32],
    config: &HybridConfig,
    values: &dyn Reconstructor,
) -> Result<HybridOutput> {
    config.check_model(model)?;
    let full = model.prefill(tokens)?;
    let mut hook = HybridTransform::new(config, model.config().n_layers, values)?;
    let out = model.forward_with(tokens, Some(&mut hook))?;
    let layer_output_mse = out
        .layers
        .iter()
        .zip(&full.layers)
        .map(|(h, f)| mse(&h.attn_out, &f.attn_out))
        .collect::<Result<Vec<_>>>()?;
    Ok(HybridOutput {
        logit_mse: mse(&out.logits, &full.logits)?,
        layer_output_mse,
        bytes: hook.bytes(),
        full_bytes: crate::echo::full_cache_bytes(model.config().n_layers, tokens.len(), model.config().d_kv()),
        logits: out.logits,
    })
}
