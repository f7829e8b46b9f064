//! Live per-sequence caches and switching between representations.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::echo::config::EchoConfig;
use crate::echo::predictor::Reconstructor;
use crate::echo::store::{evict, full_cache_bytes, EchoStore};
use crate::error::{ensure, Error, Result};
use crate::model::{LayerKV, TraceBatch};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Full,
    Echo,
}

/// Uncompressed cache: every layer's pre-RoPE keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCache {
    layers: Vec<LayerKV>,
}

impl FullCache {
    pub fn empty(n_layers: usize, d_kv: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|layer| LayerKV { layer, k: Matrix::zeros(0, d_kv), v: Matrix::zeros(0, d_kv) })
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<LayerKV>) -> Result<Self> {
        ensure!(!layers.is_empty(), Input, "cache needs at least one layer");
        let tokens = layers[0].tokens();
        for (i, l) in layers.iter().enumerate() {
            ensure!(l.layer == i, Usage, "layer {} stored at index {i}", l.layer);
            ensure!(l.tokens() == tokens, Dimension, "layer {i} has {} tokens, expected {tokens}", l.tokens());
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerKV] {
        &self.layers
    }

    pub fn bytes(&self) -> usize {
        self.layers.iter().map(|l| (l.k.len() + l.v.len()) * 4).sum()
    }
}

/// A sequence's cache under one of the two backends.
#[derive(Clone)]
pub enum CacheHandle {
    Full(FullCache),
    Echo {
        store: EchoStore,
        /// Needed to read compressed layers.
        reconstructor: Option<Arc<dyn Reconstructor>>,
    },
}

impl fmt::Debug for CacheHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheHandle::Full(c) => f.debug_tuple("Full").field(&c.layers.len()).finish(),
            CacheHandle::Echo { store, reconstructor } => f
                .debug_struct("Echo")
                .field("config", store.config())
                .field("tokens", &store.tokens())
                .field("has_reconstructor", &reconstructor.is_some())
                .finish(),
        }
    }
}

impl CacheHandle {
    pub fn from_trace(trace: &TraceBatch) -> Result<Self> {
        Ok(CacheHandle::Full(FullCache::from_layers(trace.layer_kvs())?))
    }

    pub fn mode(&self) -> CacheMode {
        match self {
            CacheHandle::Full(_) => CacheMode::Full,
            CacheHandle::Echo { .. } => CacheMode::Echo,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            CacheHandle::Full(c) => c.layers.len(),
            CacheHandle::Echo { store, .. } => store.n_layers(),
        }
    }

    pub fn d_kv(&self) -> usize {
        match self {
            CacheHandle::Full(c) => c.layers.first().map_or(0, |l| l.k.cols()),
            CacheHandle::Echo { store, .. } => store.config().d_kv,
        }
    }

    pub fn tokens(&self) -> usize {
        match self {
            CacheHandle::Full(c) => c.layers.first().map_or(0, LayerKV::tokens),
            CacheHandle::Echo { store, .. } => store.tokens(),
        }
    }

    /// Bytes currently held by the cache.
    pub fn bytes(&self) -> usize {
        match self {
            CacheHandle::Full(c) => c.bytes(),
            CacheHandle::Echo { store, .. } => store.compute_bytes().total,
        }
    }

    /// Bytes the same sequence would occupy uncompressed.
    pub fn full_bytes(&self) -> usize {
        full_cache_bytes(self.n_layers(), self.tokens(), self.d_kv())
    }

    pub fn append(&mut self, layer: usize, k_row: &[f32], v_row: &[f32]) -> Result<()> {
        match self {
            CacheHandle::Full(c) => {
                let kv = c
                    .layers
                    .get_mut(layer)
                    .ok_or_else(|| Error::Usage(format!("layer {layer} not in cache")))?;
                kv.k.push_row(k_row)?;
                kv.v.push_row(v_row)
            }
            CacheHandle::Echo { store, .. } => store.append_row(layer, k_row, v_row),
        }
    }

    /// Full-width pre-RoPE keys and values of `layer`; compressed layers are
    /// reconstructed on every call.
    pub fn read_layer(&self, layer: usize) -> Result<LayerKV> {
        match self {
            CacheHandle::Full(c) => {
                c.layers.get(layer).cloned().ok_or_else(|| Error::Usage(format!("layer {layer} not in cache")))
            }
            CacheHandle::Echo { store, reconstructor } => {
                if let Some(kv) = store.leader_layer(layer) {
                    return Ok(kv.clone());
                }
                let recon = reconstructor
                    .as_deref()
                    .ok_or_else(|| Error::Usage(format!("layer {layer} is compressed and no predictor is attached")))?;
                store.read_layer(layer, recon)
            }
        }
    }

    /// Converts to `target`. Full → echo evicts (exact for retained data);
    /// echo → full materialises reconstructions and needs a predictor,
    /// taken from `reconstructor` or the one already attached.
    pub fn switch_mode(
        self,
        target: CacheMode,
        config: &EchoConfig,
        reconstructor: Option<Arc<dyn Reconstructor>>,
    ) -> Result<CacheHandle> {
        match (self, target) {
            (h @ CacheHandle::Full(_), CacheMode::Full) => Ok(h),
            (CacheHandle::Full(c), CacheMode::Echo) => {
                let store = evict(&c.layers, config)?;
                Ok(CacheHandle::Echo { store, reconstructor })
            }
            (CacheHandle::Echo { store, reconstructor: attached }, CacheMode::Echo) => {
                Ok(CacheHandle::Echo { store, reconstructor: reconstructor.or(attached) })
            }
            (CacheHandle::Echo { store, reconstructor: attached }, CacheMode::Full) => {
                let recon = reconstructor.or(attached).ok_or_else(|| {
                    Error::Usage("switching to full mode needs a predictor bank to restore dropped heads".into())
                })?;
                let layers = (0..store.n_layers())
                    .map(|l| match store.leader_layer(l) {
                        Some(kv) => Ok(kv.clone()),
                        None => store.read_layer(l, recon.as_ref()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CacheHandle::Full(FullCache::from_layers(layers)?))
            }
        }
    }
}
