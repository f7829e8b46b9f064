use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// How layers are grouped and how much of each compressed layer is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EchoConfig {
    /// Layers per group; the first layer of each group keeps its full cache.
    pub group_size: usize,
    /// Leading channels of a compressed layer kept verbatim (the first
    /// `local_dim / d_head` heads, possibly ending mid-head).
    pub local_dim: usize,
    pub sink_tokens: usize,
    pub window: usize,
    /// Width of one layer's key cache row, `n_kv_heads × d_head`.
    pub d_kv: usize,
}

impl EchoConfig {
    pub fn new(group_size: usize, local_dim: usize, d_kv: usize) -> Self {
        Self { group_size, local_dim, sink_tokens: 4, window: 128, d_kv }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.group_size >= 1, Config, "group size must be at least 1");
        ensure!(self.d_kv > 0, Config, "KV width must be positive");
        ensure!(
            self.local_dim < self.d_kv,
            Config,
            "local dimension {} must be below the KV width {}",
            self.local_dim,
            self.d_kv
        );
        Ok(())
    }

    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        self.validate()?;
        ensure!(
            n_layers.is_multiple_of(self.group_size),
            Config,
            "{n_layers} layers cannot be split into groups of {}",
            self.group_size
        );
        Ok(())
    }

    /// Channels each predictor reads: leader row plus local slice.
    pub fn input_dim(&self) -> usize {
        self.d_kv + self.local_dim
    }

    /// Channels each predictor produces.
    pub fn output_dim(&self) -> usize {
        self.d_kv - self.local_dim
    }

    /// Stored over full cache size, ignoring sink/window rows:
    /// `(d_kv + local·(S−1)) / (d_kv·S)`.
    pub fn compute_ratio(&self) -> f64 {
        let s = self.group_size as f64;
        (self.d_kv as f64 + self.local_dim as f64 * (s - 1.0)) / (self.d_kv as f64 * s)
    }
}

/// Group structure of a layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub n_layers: usize,
    pub group_size: usize,
}

impl GroupLayout {
    pub fn leader_of(&self, layer: usize) -> usize {
        layer - layer % self.group_size
    }

    pub fn is_leader(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.group_size)
    }

    /// `(group, member)` indices of a layer.
    pub fn position(&self, layer: usize) -> (usize, usize) {
        (layer / self.group_size, layer % self.group_size)
    }

    pub fn leaders(&self) -> Vec<usize> {
        (0..self.n_layers).step_by(self.group_size).collect()
    }

    pub fn compressed(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&l| !self.is_leader(l)).collect()
    }
}

pub fn partition_layers(n_layers: usize, group_size: usize) -> Result<GroupLayout> {
    ensure!(group_size >= 1, Config, "group size must be at least 1");
    ensure!(
        n_layers.is_multiple_of(group_size),
        Config,
        "{n_layers} layers cannot be split into groups of {group_size}"
    );
    Ok(GroupLayout { n_layers, group_size })
}

/// Trainable parameters of a full predictor bank:
/// `compressed layers × 2 × input × output`.
pub fn predictor_param_count(n_layers: usize, config: &EchoConfig) -> usize {
    let compressed = n_layers / config.group_size * (config.group_size - 1);
    compressed * 2 * config.input_dim() * config.output_dim()
}
