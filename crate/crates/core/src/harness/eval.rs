//! Fidelity of a compressed cache against the full-cache forward pass.

use std::ops::Range;

use serde::Serialize;

use crate::echo::{evict, EchoConfig, EchoForward, FeatureMode, KvKind, OraclePredictor, Reconstructor};
use crate::error::{ensure, Result};
use crate::harness::config::RunMode;
use crate::hybrid::{hybrid_forward, HybridConfig};
use crate::kernel::mse;
use crate::model::{argmax, Model};
use crate::tensor::Matrix;
use crate::trainer::{reconstructed_attention, Sample};

/// What fills in the evicted channels.
#[derive(Clone, Copy)]
pub enum PredictorSource<'a> {
    /// A trained (or any fixed) reconstructor, e.g. a predictor bank.
    Fixed(&'a dyn Reconstructor),
    /// The true dropped channels of the sequence being evaluated.
    Oracle,
}

/// Overrides the feature mode of an inner reconstructor.
pub struct WithFeatures<'a> {
    pub inner: &'a dyn Reconstructor,
    pub mode: FeatureMode,
}

impl Reconstructor for WithFeatures<'_> {
    fn predict(&self, layer: usize, kind: KvKind, features: &Matrix, positions: Range<usize>) -> Result<Matrix> {
        self.inner.predict(layer, kind, features, positions)
    }

    fn feature_mode(&self) -> FeatureMode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub predictor: String,
    pub mode: RunMode,
    pub features: FeatureMode,
    pub sequences: usize,
    pub tokens: usize,
    /// Per layer, mean over sequences of the attention-output MSE with each
    /// layer reading its own true queries (zero for leaders). In hybrid mode
    /// these come from the compressed forward pass instead.
    pub layer_output_mse: Vec<f64>,
    /// Mean of `layer_output_mse` over compressed layers.
    pub mean_output_mse: f64,
    /// Final-logit MSE of the compressed forward pass, mean over sequences.
    pub logit_mse: f64,
    /// Fraction of positions whose logit argmax matches the full pass.
    pub argmax_agreement: f64,
    pub bytes: usize,
    pub full_bytes: usize,
}

struct SequenceResult {
    layer_mse: Vec<f64>,
    logit_mse: f64,
    agree: usize,
    tokens: usize,
    bytes: usize,
    full_bytes: usize,
}

fn agreement(a: &Matrix, b: &Matrix) -> usize {
    (0..a.rows()).filter(|&r| argmax(a.row(r)) == argmax(b.row(r))).count()
}

fn eval_sequence(
    model: &Model,
    tokens: &[u32],
    echo: &EchoConfig,
    source: PredictorSource<'_>,
    features: FeatureMode,
    mode: RunMode,
    hybrid: Option<&HybridConfig>,
) -> Result<SequenceResult> {
    let cfg = model.config();
    let full = model.prefill(tokens)?;
    let full_bytes = crate::echo::full_cache_bytes(cfg.n_layers, tokens.len(), cfg.d_kv());
    let oracle;
    let inner: &dyn Reconstructor = match source {
        PredictorSource::Fixed(r) => r,
        PredictorSource::Oracle => {
            oracle = OraclePredictor::new(full.layer_kvs(), echo.local_dim);
            &oracle
        }
    };
    let recon = WithFeatures { inner, mode: features };
    match mode {
        RunMode::Full => Ok(SequenceResult {
            layer_mse: vec![0.0; cfg.n_layers],
            logit_mse: 0.0,
            agree: tokens.len(),
            tokens: tokens.len(),
            bytes: full_bytes,
            full_bytes,
        }),
        RunMode::Echo => {
            let mut hook = EchoForward::new(*echo, cfg.n_layers, &recon)?;
            let compressed = model.forward_with(tokens, Some(&mut hook))?;
            let bytes = hook.into_store().compute_bytes().total;
            let logit_mse = mse(&compressed.logits, &full.logits)?;
            let agree = agreement(&compressed.logits, &full.logits);
            let sample = Sample::from_trace(full, echo)?;
            let store = evict(&sample.kv, echo)?;
            let mut layer_mse = vec![0.0; cfg.n_layers];
            for l in store.layout().compressed() {
                let (out, target) = reconstructed_attention(model, &sample, &store, l, &recon)?;
                layer_mse[l] = mse(&out, &target)?;
            }
            Ok(SequenceResult { layer_mse, logit_mse, agree, tokens: tokens.len(), bytes, full_bytes })
        }
        RunMode::Hybrid => {
            let h = hybrid.ok_or_else(|| crate::Error::Config("hybrid mode needs a hybrid section".into()))?;
            let out = hybrid_forward(model, tokens, h, &recon)?;
            Ok(SequenceResult {
                agree: agreement(&out.logits, &full.logits),
                layer_mse: out.layer_output_mse,
                logit_mse: out.logit_mse,
                tokens: tokens.len(),
                bytes: out.bytes,
                full_bytes,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    sequences: &[Vec<u32>],
    echo: &EchoConfig,
    source: PredictorSource<'_>,
    label: &str,
    features: FeatureMode,
    mode: RunMode,
    hybrid: Option<&HybridConfig>,
) -> Result<EvalReport> {
    ensure!(!sequences.is_empty(), Input, "no sequences to evaluate");
    let results = sequences
        .iter()
        .map(|s| eval_sequence(model, s, echo, source, features, mode, hybrid))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let n_layers = model.config().n_layers;
    let layer_output_mse: Vec<f64> =
        (0..n_layers).map(|l| results.iter().map(|r| r.layer_mse[l]).sum::<f64>() / n).collect();
    let layout = crate::echo::partition_layers(n_layers, echo.group_size)?;
    let scored: Vec<usize> = match mode {
        RunMode::Hybrid => (0..n_layers).collect(),
        _ => layout.compressed(),
    };
    let mean_output_mse = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|&l| layer_output_mse[l]).sum::<f64>() / scored.len() as f64
    };
    let tokens: usize = results.iter().map(|r| r.tokens).sum();
    Ok(EvalReport {
        predictor: label.to_string(),
        mode,
        features,
        sequences: results.len(),
        tokens,
        layer_output_mse,
        mean_output_mse,
        logit_mse: results.iter().map(|r| r.logit_mse).sum::<f64>() / n,
        argmax_agreement: results.iter().map(|r| r.agree).sum::<usize>() as f64 / tokens as f64,
        bytes: results.iter().map(|r| r.bytes).sum(),
        full_bytes: results.iter().map(|r| r.full_bytes).sum(),
    })
}

/// Mean attention-output MSE over compressed layers on `sequences`.
pub fn held_out_output_mse(
    model: &Model,
    sequences: &[Vec<u32>],
    echo: &EchoConfig,
    recon: &dyn Reconstructor,
) -> Result<f64> {
    ensure!(!sequences.is_empty(), Input, "no sequences to evaluate");
    let mut total = 0.0;
    for tokens in sequences {
        let sample = Sample::from_model(model, tokens, echo)?;
        let store = evict(&sample.kv, echo)?;
        let compressed = store.layout().compressed();
        let mut seq = 0.0;
        for &l in &compressed {
            let (out, target) = reconstructed_attention(model, &sample, &store, l, recon)?;
            seq += mse(&out, &target)?;
        }
        total += seq / compressed.len().max(1) as f64;
    }
    Ok(total / sequences.len() as f64)
}
