//! Run configuration, read from TOML.
//!
//! Keys may be written dotted (`model.layers = 8`) or as tables; unknown
//! keys are rejected. Every field has a default, so an empty file is the
//! desk setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, parse_corpus, synthetic_corpus};
use crate::echo::{EchoConfig, FeatureMode};
use crate::error::{ensure, Error, Result};
use crate::kernel::{AttentionGeometry, DEFAULT_ROPE_BASE};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Full,
    #[default]
    Echo,
    Hybrid,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "echo" => Ok(Self::Echo),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub seed: u64,
    pub rope_base: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.n_layers,
            q_heads: m.geometry.n_q_heads,
            kv_heads: m.geometry.n_kv_heads,
            d_head: m.geometry.d_head,
            d_ff: m.d_ff,
            seed: m.seed,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EchoSection {
    pub group_size: usize,
    pub local_dim: usize,
    pub sink_tokens: usize,
    pub window: usize,
}

impl Default for EchoSection {
    /// Half-rate grouping with 24 of 64 channels kept.
    fn default() -> Self {
        Self { group_size: 2, local_dim: 24, sink_tokens: 4, window: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridSection {
    pub key_keep_ratio: f64,
    /// Channel-score sidecar; calibrated on the training split when absent.
    pub scores: Option<PathBuf>,
    pub calibration_samples: usize,
}

impl Default for HybridSection {
    fn default() -> Self {
        Self { key_keep_ratio: 0.5, scores: None, calibration_samples: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cap on held-out sequences evaluated.
    pub max_sequences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_sequences: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub decode_tokens: usize,
    /// Simulated memory budget for the cache, in bytes.
    pub memory_cap: Option<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { lengths: vec![256, 1024, 4096], decode_tokens: 8, memory_cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeedleSection {
    pub length: usize,
    pub depths: Vec<f64>,
    pub trials: usize,
}

impl Default for NeedleSection {
    fn default() -> Self {
        Self { length: 1024, depths: (1..=9).map(|i| i as f64 / 10.0).collect(), trials: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub docs: usize,
    pub chars: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self { docs: 24, chars: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds predictor initialisation, sampling and generated data.
    pub seed: u64,
    /// Newline-delimited corpus; a generated one is used when absent.
    pub corpus: Option<PathBuf>,
    pub corpus_max_len: usize,
    pub output: PathBuf,
    pub mode: RunMode,
    pub features: FeatureMode,
    pub model: ModelSection,
    pub echo: EchoSection,
    pub train: TrainConfig,
    pub hybrid: Option<HybridSection>,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub needle: NeedleSection,
    pub synthetic: SyntheticSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: None,
            corpus_max_len: crate::trainer::MAX_TRAIN_TOKENS,
            output: PathBuf::from("out"),
            mode: RunMode::default(),
            features: FeatureMode::default(),
            model: ModelSection::default(),
            echo: EchoSection::default(),
            train: TrainConfig::default(),
            hybrid: None,
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            needle: NeedleSection::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        self.echo_config().validate_for(model.n_layers)?;
        self.train.validate()?;
        ensure!(self.corpus_max_len > 0, Config, "corpus_max_len must be positive");
        if let Some(h) = &self.hybrid {
            ensure!(
                h.key_keep_ratio > 0.0 && h.key_keep_ratio <= 1.0,
                Config,
                "hybrid.key_keep_ratio {} must lie in (0, 1]",
                h.key_keep_ratio
            );
        }
        ensure!(
            self.needle.depths.iter().all(|d| (0.0..=1.0).contains(d)),
            Config,
            "needle depths must lie in [0, 1]"
        );
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let geometry = AttentionGeometry { n_q_heads: m.q_heads, n_kv_heads: m.kv_heads, d_head: m.d_head };
        ModelConfig {
            n_layers: m.layers,
            geometry,
            d_model: geometry.q_width(),
            d_ff: m.d_ff,
            vocab: crate::corpus::BYTE_VOCAB,
            seed: m.seed,
            rope_base: m.rope_base,
        }
    }

    pub fn echo_config(&self) -> EchoConfig {
        EchoConfig {
            group_size: self.echo.group_size,
            local_dim: self.echo.local_dim,
            sink_tokens: self.echo.sink_tokens,
            window: self.echo.window,
            d_kv: self.model.kv_heads * self.model.d_head,
        }
    }

    /// Train config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Corpus documents, truncated to `corpus_max_len`.
    pub fn load_documents(&self) -> Result<Vec<Vec<u32>>> {
        match &self.corpus {
            Some(path) => load_corpus(path, self.corpus_max_len),
            None => parse_corpus(
                &synthetic_corpus(self.seed, self.synthetic.docs, self.synthetic.chars),
                self.corpus_max_len,
            ),
        }
    }
}
