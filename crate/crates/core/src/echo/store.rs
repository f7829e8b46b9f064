//! The compressed cache.
//!
//! Leader layers keep every channel. A compressed layer keeps full rows for
//! the first `sink_tokens` and the last `window` tokens, and only the first
//! `local_dim` channels for everything in between; the rest is predicted on
//! every read.

use std::ops::Range;

use serde::Serialize;

use crate::echo::config::{partition_layers, EchoConfig, GroupLayout};
use crate::echo::predictor::{FeatureMode, KvKind, Reconstructor};
use crate::error::{ensure, Error, Result};
use crate::model::{KvTransform, LayerKV};
use crate::tensor::Matrix;

const F32_BYTES: usize = 4;

/// Token rows of a `tokens`-long sequence that are stored as local slices
/// only (neither sink nor window).
pub fn middle_rows(config: &EchoConfig, tokens: usize) -> Range<usize> {
    let start = config.sink_tokens.min(tokens);
    let end = tokens.saturating_sub(config.window).max(start);
    start..end
}

/// `[local ; predicted]` along channels: retained heads first, predicted
/// heads after, restoring the original head order.
pub fn reconstruct_layer(local: &Matrix, predicted: &Matrix, d_kv: usize) -> Result<Matrix> {
    ensure!(
        local.cols() + predicted.cols() == d_kv,
        Dimension,
        "local width {} plus predicted width {} is not {d_kv}",
        local.cols(),
        predicted.cols()
    );
    local.hcat(predicted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    /// Full-width rows `[0, sinks)`.
    pub sink: LayerKV,
    /// First `local_dim` channels of the evicted rows.
    pub local: LayerKV,
    /// Full-width rows of the most recent `window` tokens.
    pub window: LayerKV,
}

impl CompressedLayer {
    fn tokens(&self) -> usize {
        self.sink.tokens() + self.local.tokens() + self.window.tokens()
    }

    fn segment(&self, kind: KvKind) -> [&Matrix; 3] {
        match kind {
            KvKind::Key => [&self.sink.k, &self.local.k, &self.window.k],
            KvKind::Value => [&self.sink.v, &self.local.v, &self.window.v],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredLayer {
    Leader(LayerKV),
    Compressed(CompressedLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Leader,
    Compressed,
}

/// Stored bytes of one layer, keys and values together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerBytes {
    pub layer: usize,
    pub role: LayerRole,
    pub leader: usize,
    pub local: usize,
    pub sink: usize,
    pub window: usize,
}

impl LayerBytes {
    pub fn total(&self) -> usize {
        self.leader + self.local + self.sink + self.window
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ByteReport {
    pub layers: Vec<LayerBytes>,
    pub total: usize,
}

/// Bytes of an uncompressed cache: `layers × tokens × d_kv × 2 × 4`.
pub fn full_cache_bytes(n_layers: usize, tokens: usize, d_kv: usize) -> usize {
    n_layers * tokens * d_kv * 2 * F32_BYTES
}

fn empty_kv(layer: usize, width: usize) -> LayerKV {
    LayerKV { layer, k: Matrix::zeros(0, width), v: Matrix::zeros(0, width) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoStore {
    config: EchoConfig,
    layout: GroupLayout,
    layers: Vec<StoredLayer>,
}

impl EchoStore {
    /// A store with no layers yet; fill it with [`EchoStore::push_layer`].
    pub fn new(config: EchoConfig, n_layers: usize) -> Result<Self> {
        config.validate_for(n_layers)?;
        Ok(Self { config, layout: partition_layers(n_layers, config.group_size)?, layers: Vec::new() })
    }

    pub fn config(&self) -> &EchoConfig {
        &self.config
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn n_layers(&self) -> usize {
        self.layout.n_layers
    }

    pub fn stored_layers(&self) -> &[StoredLayer] {
        &self.layers
    }

    pub fn tokens(&self) -> usize {
        match self.layers.first() {
            Some(StoredLayer::Leader(kv)) => kv.tokens(),
            Some(StoredLayer::Compressed(c)) => c.tokens(),
            None => 0,
        }
    }

    /// Evicts the next layer (layers must arrive in order).
    pub fn push_layer(&mut self, kv: LayerKV) -> Result<()> {
        let layer = self.layers.len();
        ensure!(layer < self.layout.n_layers, Usage, "store already holds all {} layers", self.layout.n_layers);
        ensure!(kv.layer == layer, Usage, "expected layer {layer}, got layer {}", kv.layer);
        ensure!(kv.k.cols() == self.config.d_kv, Dimension, "layer width {} != {}", kv.k.cols(), self.config.d_kv);
        if let Some(first) = self.layers.first() {
            let tokens = match first {
                StoredLayer::Leader(l) => l.tokens(),
                StoredLayer::Compressed(c) => c.tokens(),
            };
            ensure!(kv.tokens() == tokens, Dimension, "layer {layer} has {} tokens, layer 0 has {tokens}", kv.tokens());
        }
        if self.layout.is_leader(layer) {
            self.layers.push(StoredLayer::Leader(kv));
            return Ok(());
        }
        let n = kv.tokens();
        let middle = middle_rows(&self.config, n);
        let local_dim = self.config.local_dim;
        let part = |rows: Range<usize>| LayerKV { layer, k: kv.k.slice_rows(rows.clone()), v: kv.v.slice_rows(rows) };
        let sink = part(0..middle.start);
        let window = part(middle.end..n);
        let mid = part(middle);
        let local = LayerKV { layer, k: mid.k.slice_cols(0..local_dim), v: mid.v.slice_cols(0..local_dim) };
        self.layers.push(StoredLayer::Compressed(CompressedLayer { sink, local, window }));
        Ok(())
    }

    /// Appends one token's pre-RoPE key and value to `layer`. Rows leaving
    /// the window are truncated to their local slice.
    pub fn append_row(&mut self, layer: usize, k_row: &[f32], v_row: &[f32]) -> Result<()> {
        let d_kv = self.config.d_kv;
        ensure!(k_row.len() == d_kv && v_row.len() == d_kv, Dimension, "row widths {} / {}", k_row.len(), v_row.len());
        if self.layers.len() < self.layout.n_layers && layer == self.layers.len() {
            let kind = if self.layout.is_leader(layer) {
                StoredLayer::Leader(empty_kv(layer, d_kv))
            } else {
                StoredLayer::Compressed(CompressedLayer {
                    sink: empty_kv(layer, d_kv),
                    local: empty_kv(layer, self.config.local_dim),
                    window: empty_kv(layer, d_kv),
                })
            };
            self.layers.push(kind);
        }
        let (sinks, window_len, local_dim) = (self.config.sink_tokens, self.config.window, self.config.local_dim);
        match self.layers.get_mut(layer) {
            None => Err(Error::Usage(format!("layer {layer} not present in store"))),
            Some(StoredLayer::Leader(kv)) => {
                kv.k.push_row(k_row)?;
                kv.v.push_row(v_row)
            }
            Some(StoredLayer::Compressed(c)) => {
                if c.sink.tokens() < sinks {
                    c.sink.k.push_row(k_row)?;
                    return c.sink.v.push_row(v_row);
                }
                c.window.k.push_row(k_row)?;
                c.window.v.push_row(v_row)?;
                if c.window.tokens() > window_len {
                    let k_old = c.window.k.row(0)[..local_dim].to_vec();
                    let v_old = c.window.v.row(0)[..local_dim].to_vec();
                    c.window.k.drop_front_rows(1);
                    c.window.v.drop_front_rows(1);
                    c.local.k.push_row(&k_old)?;
                    c.local.v.push_row(&v_old)?;
                }
                Ok(())
            }
        }
    }

    fn stored(&self, layer: usize) -> Result<&StoredLayer> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("layer {layer} not present in store")))
    }

    fn leader_rows(&self, layer: usize, kind: KvKind, rows: Range<usize>) -> Result<Matrix> {
        let leader = self.layout.leader_of(layer);
        match self.stored(leader)? {
            StoredLayer::Leader(kv) => {
                let src = match kind {
                    KvKind::Key => &kv.k,
                    KvKind::Value => &kv.v,
                };
                ensure!(rows.end <= src.rows(), Usage, "rows {rows:?} beyond {} stored tokens", src.rows());
                Ok(src.slice_rows(rows))
            }
            StoredLayer::Compressed(_) => Err(Error::Usage(format!("layer {leader} is not a leader"))),
        }
    }

    /// First `local_dim` channels of `rows`, drawn from whichever segment
    /// holds each row.
    fn local_rows(&self, c: &CompressedLayer, kind: KvKind, rows: Range<usize>) -> Result<Matrix> {
        let local_dim = self.config.local_dim;
        let [sink, local, window] = c.segment(kind);
        let (s_end, m_end) = (sink.rows(), sink.rows() + local.rows());
        ensure!(rows.end <= m_end + window.rows(), Usage, "rows {rows:?} beyond {} stored tokens", m_end + window.rows());
        let mut out = Matrix::zeros(rows.len(), local_dim);
        for (o, r) in rows.enumerate() {
            let src = if r < s_end {
                &sink.row(r)[..local_dim]
            } else if r < m_end {
                local.row(r - s_end)
            } else {
                &window.row(r - m_end)[..local_dim]
            };
            out.row_mut(o).copy_from_slice(src);
        }
        Ok(out)
    }

    /// Per-token `[leader row ; local slice]` features for a compressed
    /// layer, width `d_kv + local_dim`. Keys stay in pre-RoPE space.
    pub fn assemble_features(&self, layer: usize, kind: KvKind, rows: Range<usize>, mode: FeatureMode) -> Result<Matrix> {
        let c = match self.stored(layer)? {
            StoredLayer::Compressed(c) => c,
            StoredLayer::Leader(_) => {
                return Err(Error::Usage(format!("layer {layer} is a group leader and has no features")))
            }
        };
        let mut global = self.leader_rows(layer, kind, rows.clone())?;
        let mut local = self.local_rows(c, kind, rows)?;
        match mode {
            FeatureMode::Combined => {}
            FeatureMode::GlobalOnly => local.as_mut_slice().fill(0.0),
            FeatureMode::LocalOnly => global.as_mut_slice().fill(0.0),
        }
        global.hcat(&local)
    }

    /// Middle (evicted) rows of the stored sequence.
    pub fn evicted_rows(&self) -> Range<usize> {
        match self.layers.iter().find_map(|l| match l {
            StoredLayer::Compressed(c) => Some(c),
            StoredLayer::Leader(_) => None,
        }) {
            Some(c) => c.sink.tokens()..c.sink.tokens() + c.local.tokens(),
            None => middle_rows(&self.config, self.tokens()),
        }
    }

    /// Full-width `kind` matrix for `layer`, predicting evicted channels.
    pub fn read_kind(&self, layer: usize, kind: KvKind, recon: &dyn Reconstructor) -> Result<Matrix> {
        let c = match self.stored(layer)? {
            StoredLayer::Leader(kv) => {
                return Ok(match kind {
                    KvKind::Key => kv.k.clone(),
                    KvKind::Value => kv.v.clone(),
                })
            }
            StoredLayer::Compressed(c) => c,
        };
        let [sink, local, window] = c.segment(kind);
        let start = sink.rows();
        let middle = start..start + local.rows();
        let restored = if middle.is_empty() {
            Matrix::zeros(0, self.config.d_kv)
        } else {
            let features = self.assemble_features(layer, kind, middle.clone(), recon.feature_mode())?;
            let predicted = recon.predict(layer, kind, &features, middle.clone())?;
            ensure!(
                predicted.shape() == (middle.len(), self.config.output_dim()),
                Dimension,
                "predictor returned {:?} for {} rows of width {}",
                predicted.shape(),
                middle.len(),
                self.config.output_dim()
            );
            reconstruct_layer(local, &predicted, self.config.d_kv)?
        };
        sink.vcat(&restored)?.vcat(window)
    }

    pub fn read_layer(&self, layer: usize, recon: &dyn Reconstructor) -> Result<LayerKV> {
        Ok(LayerKV {
            layer,
            k: self.read_kind(layer, KvKind::Key, recon)?,
            v: self.read_kind(layer, KvKind::Value, recon)?,
        })
    }

    /// Leader layers are served from storage without any predictor.
    pub fn leader_layer(&self, layer: usize) -> Option<&LayerKV> {
        match self.layers.get(layer) {
            Some(StoredLayer::Leader(kv)) => Some(kv),
            _ => None,
        }
    }

    /// Exact stored bytes, itemised per layer.
    pub fn compute_bytes(&self) -> ByteReport {
        let layers: Vec<LayerBytes> = self
            .layers
            .iter()
            .enumerate()
            .map(|(layer, stored)| match stored {
                StoredLayer::Leader(kv) => LayerBytes {
                    layer,
                    role: LayerRole::Leader,
                    leader: (kv.k.len() + kv.v.len()) * F32_BYTES,
                    local: 0,
                    sink: 0,
                    window: 0,
                },
                StoredLayer::Compressed(c) => LayerBytes {
                    layer,
                    role: LayerRole::Compressed,
                    leader: 0,
                    local: (c.local.k.len() + c.local.v.len()) * F32_BYTES,
                    sink: (c.sink.k.len() + c.sink.v.len()) * F32_BYTES,
                    window: (c.window.k.len() + c.window.v.len()) * F32_BYTES,
                },
            })
            .collect();
        let total = layers.iter().map(LayerBytes::total).sum();
        ByteReport { layers, total }
    }
}

/// Evicts a full per-layer cache into an [`EchoStore`].
pub fn evict(full: &[LayerKV], config: &EchoConfig) -> Result<EchoStore> {
    let mut store = EchoStore::new(*config, full.len())?;
    for kv in full {
        store.push_layer(kv.clone())?;
    }
    Ok(store)
}

/// Forward-pass hook that evicts each layer as it is produced and hands
/// attention the reconstruction, so errors compound through the stack as
/// they would during compressed inference.
pub struct EchoForward<'a> {
    store: EchoStore,
    recon: &'a dyn Reconstructor,
}

impl<'a> EchoForward<'a> {
    pub fn new(config: EchoConfig, n_layers: usize, recon: &'a dyn Reconstructor) -> Result<Self> {
        Ok(Self { store: EchoStore::new(config, n_layers)?, recon })
    }

    pub fn into_store(self) -> EchoStore {
        self.store
    }
}

impl KvTransform for EchoForward<'_> {
    fn transform(&mut self, kv: LayerKV) -> Result<LayerKV> {
        let layer = kv.layer;
        if self.store.layout().is_leader(layer) {
            self.store.push_layer(kv.clone())?;
            return Ok(kv);
        }
        self.store.push_layer(kv)?;
        self.store.read_layer(layer, self.recon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::predictor::OraclePredictor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layers(n_layers: usize, tokens: usize, d_kv: usize, seed: u64) -> Vec<LayerKV> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_layers)
            .map(|l| LayerKV {
                layer: l,
                k: Matrix::randn(tokens, d_kv, 1.0, &mut rng),
                v: Matrix::randn(tokens, d_kv, 1.0, &mut rng),
            })
            .collect()
    }

    #[test]
    fn short_sequence_stored_in_full() {
        let layers = random_layers(4, 100, 16, 0);
        let cfg = EchoConfig::new(2, 4, 16);
        let store = evict(&layers, &cfg).unwrap();
        let bytes = store.compute_bytes();
        assert_eq!(bytes.total, full_cache_bytes(4, 100, 16));
        let oracle = OraclePredictor::new(layers.clone(), 4);
        for kv in &layers {
            assert_eq!(&store.read_layer(kv.layer, &oracle).unwrap(), kv);
        }
    }

    #[test]
    fn row_accounting_with_zero_local() {
        let layers = random_layers(2, 1000, 8, 1);
        let cfg = EchoConfig::new(2, 0, 8);
        let store = evict(&layers, &cfg).unwrap();
        match &store.stored_layers()[1] {
            StoredLayer::Compressed(c) => {
                assert_eq!(c.sink.tokens() + c.window.tokens(), 132);
                assert_eq!(c.local.tokens(), 868);
                assert_eq!(c.local.k.cols(), 0);
            }
            StoredLayer::Leader(_) => panic!("layer 1 should be compressed"),
        }
        let bytes = store.compute_bytes();
        assert_eq!(bytes.layers[0].total(), 1000 * 8 * 2 * 4);
        assert_eq!(bytes.layers[1].total(), 132 * 8 * 2 * 4);
    }

    #[test]
    fn features_global_only_when_no_local() {
        let layers = random_layers(2, 300, 8, 2);
        let store = evict(&layers, &EchoConfig::new(2, 0, 8)).unwrap();
        let f = store.assemble_features(1, KvKind::Key, 4..172, FeatureMode::Combined).unwrap();
        assert_eq!(f, layers[0].k.slice_rows(4..172));
        assert!(matches!(
            store.assemble_features(0, KvKind::Key, 0..1, FeatureMode::Combined),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn feature_masks() {
        let layers = random_layers(2, 200, 8, 3);
        let store = evict(&layers, &EchoConfig::new(2, 4, 8)).unwrap();
        let rows = 10..20;
        let both = store.assemble_features(1, KvKind::Value, rows.clone(), FeatureMode::Combined).unwrap();
        assert_eq!(both.cols(), 12);
        assert_eq!(both.slice_cols(8..12), layers[1].v.slice_rows(rows.clone()).slice_cols(0..4));
        let g = store.assemble_features(1, KvKind::Value, rows.clone(), FeatureMode::GlobalOnly).unwrap();
        assert_eq!(g.slice_cols(0..8), both.slice_cols(0..8));
        assert!(g.slice_cols(8..12).as_slice().iter().all(|&x| x == 0.0));
        let l = store.assemble_features(1, KvKind::Value, rows, FeatureMode::LocalOnly).unwrap();
        assert!(l.slice_cols(0..8).as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(l.slice_cols(8..12), both.slice_cols(8..12));
    }

    #[test]
    fn appending_matches_bulk_eviction() {
        let layers = random_layers(4, 150, 8, 4);
        let mut cfg = EchoConfig::new(2, 2, 8);
        cfg.window = 16;
        let bulk = evict(&layers, &cfg).unwrap();
        let mut inc = EchoStore::new(cfg, 4).unwrap();
        for t in 0..150 {
            for kv in &layers {
                inc.append_row(kv.layer, kv.k.row(t), kv.v.row(t)).unwrap();
            }
        }
        assert_eq!(inc, bulk);
    }

    #[test]
    fn reconstruct_width_checked() {
        let local = Matrix::zeros(3, 4);
        let pred = Matrix::zeros(3, 3);
        assert!(reconstruct_layer(&local, &pred, 8).is_err());
        assert_eq!(reconstruct_layer(&local, &Matrix::zeros(3, 4), 8).unwrap().shape(), (3, 8));
    }
}
