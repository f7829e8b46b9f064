//! Two-stage predictor training against a frozen model.
//!
//! Stage 1 fits the dropped channels directly (mean squared error on keys
//! and values). Stage 2 refines the bank through attention: it compares the
//! attention output computed from the reconstructed cache with the output
//! from the true cache and back-propagates through attention into both the
//! key and value maps. A KL divergence between attention distributions is
//! available as an alternative stage-2 objective for comparison.
//!
//! Gradients from every compressed layer are summed into one AdamW step per
//! batch; the schedule is cosine decay with no warmup.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::echo::{evict, EchoConfig, EchoForward, EchoStore, FeatureMode, KvKind, PredictorBank};
use crate::error::{ensure, Error, Result};
use crate::kernel::{
    adamw_step, attention_grad_kv_with_stats, aux_mem, causal_attention, causal_attention_with_stats, cosine_lr, mse,
    mse_grad, qk_kl_loss_and_grad, rope_apply, rope_inverse, AdamWParams, Moments,
};
use crate::model::{LayerKV, Model, TraceBatch};
use crate::tensor::{matmul_t, matmul_tn, Matrix};

/// Longest sequence used for training.
pub const MAX_TRAIN_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Loss {
    #[default]
    OMse,
    QkKl,
}

impl std::str::FromStr for Stage2Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o_mse" => Ok(Self::OMse),
            "qk_kl" => Ok(Self::QkKl),
            other => Err(Error::Config(format!("unknown stage-2 loss {other:?}"))),
        }
    }
}

/// Where stage-2 takes its queries and predictor inputs from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Each layer sees the true cache of the frozen full-cache forward.
    #[default]
    TeacherForced,
    /// A compressed forward pass feeds reconstruction errors into later
    /// layers; gradients still stop at the stream.
    Compounding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub loss_stage2: Stage2Loss,
    pub propagation: Propagation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWParams::default();
        Self {
            lr: 5e-4,
            steps_stage1: 600,
            steps_stage2: 1000,
            batch: 1,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            loss_stage2: Stage2Loss::OMse,
            propagation: Propagation::TeacherForced,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamWParams {
        AdamWParams { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate {} must be positive", self.lr);
        ensure!(self.batch >= 1, Config, "batch size must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "betas must lie in [0, 1)"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Wall time per stage, in the order the stages ran.
    pub stage_ms: Vec<(u8, f64)>,
    pub final_checksum: String,
}

impl TrainReport {
    pub fn losses(&self, stage: u8) -> Vec<f64> {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }

    pub fn append(&mut self, other: TrainReport) {
        self.records.extend(other.records);
        self.stage_ms.extend(other.stage_ms);
        self.final_checksum = other.final_checksum;
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
    }
}

/// What training needs from one prefilled sequence.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub kv: Vec<LayerKV>,
    /// Post-RoPE queries, compressed layers only.
    pub q: Vec<Option<Matrix>>,
    /// Full-cache attention output, compressed layers only.
    pub attn_out: Vec<Option<Matrix>>,
}

impl Sample {
    pub fn from_model(model: &Model, tokens: &[u32], echo: &EchoConfig) -> Result<Self> {
        Self::from_trace(model.prefill(tokens)?, echo)
    }

    pub fn from_trace(trace: TraceBatch, echo: &EchoConfig) -> Result<Self> {
        let layout = crate::echo::partition_layers(trace.layers.len(), echo.group_size)?;
        let mut kv = Vec::with_capacity(trace.layers.len());
        let mut q = Vec::with_capacity(trace.layers.len());
        let mut attn_out = Vec::with_capacity(trace.layers.len());
        for (l, layer) in trace.layers.into_iter().enumerate() {
            kv.push(layer.kv);
            let keep = !layout.is_leader(l);
            q.push(keep.then_some(layer.q));
            attn_out.push(keep.then_some(layer.attn_out));
        }
        Ok(Self { tokens: trace.tokens, kv, q, attn_out })
    }
}

/// Lazily prefilled training sequences. The model is frozen, so each
/// sequence is run through it at most once.
pub struct SampleCache<'a> {
    model: &'a Model,
    sequences: Vec<Vec<u32>>,
    echo: EchoConfig,
    cache: HashMap<usize, Arc<Sample>>,
}

impl<'a> SampleCache<'a> {
    pub fn new(model: &'a Model, sequences: &[Vec<u32>], echo: EchoConfig) -> Result<Self> {
        ensure!(!sequences.is_empty(), Input, "no training sequences");
        let sequences = sequences
            .iter()
            .map(|s| s[..s.len().min(MAX_TRAIN_TOKENS)].to_vec())
            .collect::<Vec<_>>();
        ensure!(sequences.iter().all(|s| !s.is_empty()), Input, "empty training sequence");
        Ok(Self { model, sequences, echo, cache: HashMap::new() })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn get(&mut self, index: usize) -> Result<Arc<Sample>> {
        if let Some(s) = self.cache.get(&index) {
            return Ok(Arc::clone(s));
        }
        let sample = Arc::new(Sample::from_model(self.model, &self.sequences[index], &self.echo)?);
        self.cache.insert(index, Arc::clone(&sample));
        Ok(sample)
    }
}

/// Per-layer, per-kind weight gradients in bank order.
struct Gradients {
    layers: Vec<usize>,
    key: Vec<Matrix>,
    value: Vec<Matrix>,
}

impl Gradients {
    fn zeros(bank: &PredictorBank) -> Self {
        let layers: Vec<usize> = bank.predictors().map(|p| p.layer).collect();
        let shape = |p: &crate::echo::Predictor| Matrix::zeros(p.w_key.rows(), p.w_key.cols());
        Self {
            layers,
            key: bank.predictors().map(shape).collect(),
            value: bank.predictors().map(shape).collect(),
        }
    }

    fn slot(&mut self, layer: usize, kind: KvKind) -> &mut Matrix {
        let i = self.layers.iter().position(|&l| l == layer).expect("known layer");
        match kind {
            KvKind::Key => &mut self.key[i],
            KvKind::Value => &mut self.value[i],
        }
    }

    fn scale(&mut self, s: f32) {
        self.key.iter_mut().chain(&mut self.value).for_each(|g| g.scale(s));
    }
}

/// Copy of `full` with the dropped channels of the evicted rows replaced.
fn splice(full: &Matrix, rows: std::ops::Range<usize>, local_dim: usize, predicted: &Matrix) -> Matrix {
    let mut out = full.clone();
    for (i, r) in rows.enumerate() {
        out.row_mut(r)[local_dim..].copy_from_slice(predicted.row(i));
    }
    out
}

fn dropped_slice(m: &Matrix, rows: std::ops::Range<usize>, local_dim: usize) -> Matrix {
    m.slice_rows(rows).slice_cols(local_dim..m.cols())
}

/// Accumulates `scale · dPredᵀ F` into the weight gradient.
fn accumulate_weight_grad(grads: &mut Gradients, layer: usize, kind: KvKind, d_pred: &Matrix, features: &Matrix) -> Result<()> {
    let dw = matmul_tn(d_pred, features)?;
    grads.slot(layer, kind).add_assign(&dw)
}

/// Mean reconstruction MSE (keys and values averaged over compressed
/// layers) of the evicted rows, optionally with its weight gradient.
fn stage1_loss(
    bank: &PredictorBank,
    sample: &Sample,
    echo: &EchoConfig,
    features: FeatureMode,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let store = evict(&sample.kv, echo)?;
    let rows = store.evicted_rows();
    let compressed = store.layout().compressed();
    if rows.is_empty() || compressed.is_empty() {
        return Ok(0.0);
    }
    let norm = 2.0 * compressed.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for &l in &compressed {
        let p = bank.predictor(l).ok_or_else(|| Error::Usage(format!("no predictor for layer {l}")))?;
        for kind in [KvKind::Key, KvKind::Value] {
            let f = store.assemble_features(l, kind, rows.clone(), features)?;
            let pred = matmul_t(&f, p.weights(kind))?;
            let truth = match kind {
                KvKind::Key => &sample.kv[l].k,
                KvKind::Value => &sample.kv[l].v,
            };
            let target = dropped_slice(truth, rows.clone(), echo.local_dim);
            total += mse(&pred, &target)?;
            if let Some(g) = grads.as_deref_mut() {
                let mut d = mse_grad(&pred, &target)?;
                d.scale((1.0 / norm) as f32);
                accumulate_weight_grad(g, l, kind, &d, &f)?;
            }
        }
    }
    Ok(total / norm)
}

/// Inputs to one compressed layer's attention: where features and queries
/// come from.
struct LayerView<'s> {
    store: &'s EchoStore,
    kv: &'s LayerKV,
    q: &'s Matrix,
}

/// Attention-space loss for one layer plus gradients into the predictor.
#[allow(clippy::too_many_arguments)]
fn stage2_layer(
    model: &Model,
    bank: &PredictorBank,
    view: &LayerView<'_>,
    layer: usize,
    target_out: &Matrix,
    true_kv: &LayerKV,
    loss_kind: Stage2Loss,
    features: FeatureMode,
    layer_weight: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let cfg = model.config();
    let g = &cfg.geometry;
    let echo = view.store.config();
    let rows = view.store.evicted_rows();
    let p = bank.predictor(layer).ok_or_else(|| Error::Usage(format!("no predictor for layer {layer}")))?;
    let fk = view.store.assemble_features(layer, KvKind::Key, rows.clone(), features)?;
    let fv = view.store.assemble_features(layer, KvKind::Value, rows.clone(), features)?;
    let pk = matmul_t(&fk, &p.w_key)?;
    let pv = matmul_t(&fv, &p.w_value)?;
    let k_rec = splice(&view.kv.k, rows.clone(), echo.local_dim, &pk);
    let v_rec = splice(&view.kv.v, rows.clone(), echo.local_dim, &pv);
    let positions: Vec<usize> = (0..k_rec.rows()).collect();
    let k_rot = rope_apply(&k_rec, &positions, g, cfg.rope_base)?;

    match loss_kind {
        Stage2Loss::OMse => {
            let (out, stats) = causal_attention_with_stats(view.q, &k_rot, &v_rec, g)?;
            let loss = mse(&out, target_out)?;
            if let Some(grads) = grads {
                let mut d_out = mse_grad(&out, target_out)?;
                d_out.scale(layer_weight as f32);
                let (dk_rot, dv) = attention_grad_kv_with_stats(view.q, &k_rot, &v_rec, &out, &stats, &d_out, g)?;
                let dk = rope_inverse(&dk_rot, &positions, g, cfg.rope_base)?;
                accumulate_weight_grad(grads, layer, KvKind::Key, &dropped_slice(&dk, rows.clone(), echo.local_dim), &fk)?;
                accumulate_weight_grad(grads, layer, KvKind::Value, &dropped_slice(&dv, rows, echo.local_dim), &fv)?;
            }
            Ok(loss)
        }
        Stage2Loss::QkKl => {
            let k_true_rot = rope_apply(&true_kv.k, &positions, g, cfg.rope_base)?;
            let (loss, dk_rot) = qk_kl_loss_and_grad(view.q, &k_true_rot, &k_rot, g)?;
            if let Some(grads) = grads {
                let mut dk = rope_inverse(&dk_rot, &positions, g, cfg.rope_base)?;
                dk.scale(layer_weight as f32);
                accumulate_weight_grad(grads, layer, KvKind::Key, &dropped_slice(&dk, rows, echo.local_dim), &fk)?;
            }
            Ok(loss)
        }
    }
}

/// Stage-2 loss (mean over compressed layers) for one sample.
fn stage2_loss(
    model: &Model,
    bank: &PredictorBank,
    sample: &Sample,
    echo: &EchoConfig,
    loss_kind: Stage2Loss,
    propagation: Propagation,
    features: FeatureMode,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let layout = crate::echo::partition_layers(model.config().n_layers, echo.group_size)?;
    let compressed = layout.compressed();
    if compressed.is_empty() {
        return Ok(0.0);
    }
    let (store, streamed) = match propagation {
        Propagation::TeacherForced => (evict(&sample.kv, echo)?, None),
        Propagation::Compounding => {
            let bank_view = bank.clone().with_feature_mode(features);
            let mut hook = EchoForward::new(*echo, model.config().n_layers, &bank_view)?;
            let trace = model.forward_with(&sample.tokens, Some(&mut hook))?;
            (hook.into_store(), Some(trace))
        }
    };
    if store.evicted_rows().is_empty() {
        return Ok(0.0);
    }
    let weight = 1.0 / compressed.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for &l in &compressed {
        let target = sample.attn_out[l].as_ref().ok_or_else(|| Error::Usage(format!("sample lacks layer {l}")))?;
        let view = match &streamed {
            None => LayerView {
                store: &store,
                kv: &sample.kv[l],
                q: sample.q[l].as_ref().ok_or_else(|| Error::Usage(format!("sample lacks layer {l}")))?,
            },
            Some(trace) => LayerView { store: &store, kv: &trace.layers[l].kv, q: &trace.layers[l].q },
        };
        total += stage2_layer(model, bank, &view, l, target, &sample.kv[l], loss_kind, features, weight, grads.as_deref_mut())?;
    }
    Ok(total * weight)
}

/// Optimizer state for a bank: one moment pair per weight matrix.
struct BankOptimizer {
    key: Vec<Moments>,
    value: Vec<Moments>,
    params: AdamWParams,
    step: u64,
}

impl BankOptimizer {
    fn new(bank: &PredictorBank, params: AdamWParams) -> Self {
        Self {
            key: bank.predictors().map(|p| Moments::zeros(p.w_key.len())).collect(),
            value: bank.predictors().map(|p| Moments::zeros(p.w_value.len())).collect(),
            params,
            step: 0,
        }
    }

    fn apply(&mut self, bank: &mut PredictorBank, grads: &Gradients, lr: f64, update_values: bool) -> Result<()> {
        self.step += 1;
        for (i, p) in bank.predictors_mut().enumerate() {
            adamw_step(p.w_key.as_mut_slice(), grads.key[i].as_slice(), &mut self.key[i], self.step, lr, &self.params)?;
            if update_values {
                adamw_step(
                    p.w_value.as_mut_slice(),
                    grads.value[i].as_slice(),
                    &mut self.value[i],
                    self.step,
                    lr,
                    &self.params,
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Reconstruction,
    Attention(Stage2Loss),
}

fn run_stage(
    samples: &mut SampleCache<'_>,
    mut bank: PredictorBank,
    cfg: &TrainConfig,
    stage: u8,
    steps: usize,
    objective: Objective,
) -> Result<(PredictorBank, TrainReport)> {
    cfg.validate()?;
    bank.ensure_matches(samples.model().config())?;
    let echo = *bank.echo_config();
    let features = crate::echo::Reconstructor::feature_mode(&bank);
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(u64::from(stage)));
    let mut opt = BankOptimizer::new(&bank, cfg.adam());
    let update_values = !matches!(objective, Objective::Attention(Stage2Loss::QkKl));
    for step in 0..steps {
        let lr = cosine_lr(step, steps, cfg.lr)?;
        let mut grads = Gradients::zeros(&bank);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let sample = samples.get(rng.random_range(0..samples.len()))?;
            loss += match objective {
                Objective::Reconstruction => stage1_loss(&bank, &sample, &echo, features, Some(&mut grads))?,
                Objective::Attention(kind) => stage2_loss(
                    samples.model(),
                    &bank,
                    &sample,
                    &echo,
                    kind,
                    cfg.propagation,
                    features,
                    Some(&mut grads),
                )?,
            };
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!("stage {stage} loss became {loss} at step {step}")));
        }
        grads.scale(1.0 / cfg.batch as f32);
        opt.apply(&mut bank, &grads, lr, update_values)?;
        report.records.push(StepRecord {
            step,
            stage,
            loss,
            lr,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    report.stage_ms.push((stage, start.elapsed().as_secs_f64() * 1e3));
    report.final_checksum = bank.checksum();
    Ok((bank, report))
}

/// Stage 1: direct reconstruction of the dropped channels.
pub fn stage1_train(
    samples: &mut SampleCache<'_>,
    bank: PredictorBank,
    cfg: &TrainConfig,
) -> Result<(PredictorBank, TrainReport)> {
    run_stage(samples, bank, cfg, 1, cfg.steps_stage1, Objective::Reconstruction)
}

/// Stage 2 with the objective chosen by `cfg.loss_stage2`.
pub fn stage2_train(
    samples: &mut SampleCache<'_>,
    bank: PredictorBank,
    cfg: &TrainConfig,
) -> Result<(PredictorBank, TrainReport)> {
    run_stage(samples, bank, cfg, 2, cfg.steps_stage2, Objective::Attention(cfg.loss_stage2))
}

/// Stage 2 with the attention-distribution KL objective; only key maps move.
pub fn stage2_train_qkkl(
    samples: &mut SampleCache<'_>,
    bank: PredictorBank,
    cfg: &TrainConfig,
) -> Result<(PredictorBank, TrainReport)> {
    run_stage(samples, bank, cfg, 2, cfg.steps_stage2, Objective::Attention(Stage2Loss::QkKl))
}

/// Stage 1 followed by stage 2.
pub fn train_two_stage(
    samples: &mut SampleCache<'_>,
    bank: PredictorBank,
    cfg: &TrainConfig,
) -> Result<(PredictorBank, TrainReport)> {
    let (bank, mut report) = stage1_train(samples, bank, cfg)?;
    let (bank, second) = stage2_train(samples, bank, cfg)?;
    report.append(second);
    Ok((bank, report))
}

/// Stage-1 objective of `bank` on one sample, without updating anything.
pub fn reconstruction_loss(bank: &PredictorBank, sample: &Sample) -> Result<f64> {
    stage1_loss(bank, sample, bank.echo_config(), crate::echo::Reconstructor::feature_mode(bank), None)
}

/// Stage-2 objective of `bank` on one sample, without updating anything.
pub fn attention_loss(model: &Model, bank: &PredictorBank, sample: &Sample, loss: Stage2Loss) -> Result<f64> {
    stage2_loss(
        model,
        bank,
        sample,
        bank.echo_config(),
        loss,
        Propagation::TeacherForced,
        crate::echo::Reconstructor::feature_mode(bank),
        None,
    )
}

/// Gradients of the stage-1 or stage-2 objective on one sample, as
/// `(layer, w_key grad, w_value grad)` in ascending layer order.
pub fn loss_gradients(
    model: &Model,
    bank: &PredictorBank,
    sample: &Sample,
    objective: Option<Stage2Loss>,
) -> Result<(f64, Vec<(usize, Matrix, Matrix)>)> {
    let mut grads = Gradients::zeros(bank);
    let features = crate::echo::Reconstructor::feature_mode(bank);
    let echo = bank.echo_config();
    let loss = match objective {
        None => stage1_loss(bank, sample, echo, features, Some(&mut grads))?,
        Some(kind) => {
            stage2_loss(model, bank, sample, echo, kind, Propagation::TeacherForced, features, Some(&mut grads))?
        }
    };
    let out = grads.layers.iter().zip(grads.key).zip(grads.value).map(|((&l, k), v)| (l, k, v)).collect();
    Ok((loss, out))
}

/// Peak scratch bytes of one loss-and-gradient evaluation of a stage-2
/// objective on a single compressed layer of `sample`.
pub fn stage2_peak_aux_bytes(model: &Model, bank: &PredictorBank, sample: &Sample, loss: Stage2Loss) -> Result<usize> {
    let echo = bank.echo_config();
    let store = evict(&sample.kv, echo)?;
    let layer = *store
        .layout()
        .compressed()
        .first()
        .ok_or_else(|| Error::Usage("configuration has no compressed layers".into()))?;
    let q = sample.q[layer].as_ref().ok_or_else(|| Error::Usage(format!("sample lacks layer {layer}")))?;
    let target = sample.attn_out[layer].as_ref().ok_or_else(|| Error::Usage(format!("sample lacks layer {layer}")))?;
    let view = LayerView { store: &store, kv: &sample.kv[layer], q };
    let mut grads = Gradients::zeros(bank);
    let features = crate::echo::Reconstructor::feature_mode(bank);
    let (res, peak) = aux_mem::measure_peak(|| {
        stage2_layer(model, bank, &view, layer, target, &sample.kv[layer], loss, features, 1.0, Some(&mut grads))
    });
    res?;
    Ok(peak)
}

/// Attention output of `layer` when it reads the cache reconstructed by
/// `recon` (teacher-forced queries), and the full-cache output.
pub fn reconstructed_attention(
    model: &Model,
    sample: &Sample,
    store: &EchoStore,
    layer: usize,
    recon: &dyn crate::echo::Reconstructor,
) -> Result<(Matrix, Matrix)> {
    let cfg = model.config();
    let q = sample.q[layer].as_ref().ok_or_else(|| Error::Usage(format!("sample lacks layer {layer}")))?;
    let target = sample.attn_out[layer].as_ref().ok_or_else(|| Error::Usage(format!("sample lacks layer {layer}")))?;
    let kv = store.read_layer(layer, recon)?;
    let positions: Vec<usize> = (0..kv.tokens()).collect();
    let k_rot = rope_apply(&kv.k, &positions, &cfg.geometry, cfg.rope_base)?;
    let out = causal_attention(q, &k_rot, &kv.v, &cfg.geometry)?;
    Ok((out, target.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::{BankGeometry, OraclePredictor};
    use crate::kernel::AttentionGeometry;
    use crate::model::ModelConfig;

    fn tiny() -> (Model, EchoConfig, Vec<Vec<u32>>) {
        let cfg = ModelConfig {
            n_layers: 4,
            geometry: AttentionGeometry { n_q_heads: 4, n_kv_heads: 2, d_head: 4 },
            d_model: 16,
            d_ff: 32,
            ..Default::default()
        };
        let model = Model::init(cfg).unwrap();
        let mut echo = EchoConfig::new(2, 4, 8);
        echo.sink_tokens = 2;
        echo.window = 4;
        let text = crate::corpus::synthetic_corpus(1, 6, 40);
        let docs = crate::corpus::parse_corpus(&text, 40).unwrap();
        (model, echo, docs)
    }

    fn bank(model: &Model, echo: EchoConfig, seed: u64) -> PredictorBank {
        let g = BankGeometry::for_model(model.config(), &echo).unwrap();
        PredictorBank::random(g, echo, seed).unwrap().with_retention(echo.sink_tokens, echo.window)
    }

    #[test]
    fn zero_steps_leave_bank_unchanged() {
        let (model, echo, docs) = tiny();
        let b = bank(&model, echo, 1);
        let mut samples = SampleCache::new(&model, &docs, echo).unwrap();
        let cfg = TrainConfig { steps_stage1: 0, ..Default::default() };
        let (out, report) = stage1_train(&mut samples, b.clone(), &cfg).unwrap();
        assert_eq!(out, b);
        assert!(report.records.is_empty());
    }

    #[test]
    fn first_recorded_loss_is_initial_bank_loss() {
        let (model, echo, docs) = tiny();
        let b = bank(&model, echo, 2);
        let cfg = TrainConfig { steps_stage1: 3, seed: 9, ..Default::default() };
        let mut samples = SampleCache::new(&model, &docs, echo).unwrap();
        let first = ChaCha8Rng::seed_from_u64(cfg.seed + 1).random_range(0..docs.len());
        let want = reconstruction_loss(&b, &samples.get(first).unwrap()).unwrap();
        let (_, report) = stage1_train(&mut samples, b, &cfg).unwrap();
        assert_eq!(report.records[0].loss, want);
        assert_eq!(report.records.len(), 3);
    }

    #[test]
    fn oracle_bank_has_zero_attention_loss() {
        // With no local channels and a leader whose cache equals the target,
        // the identity map is an exact predictor.
        let (model, mut echo, docs) = tiny();
        echo.local_dim = 0;
        let mut sample = Sample::from_model(&model, &docs[0], &echo).unwrap();
        for l in [1, 3] {
            sample.kv[l] = LayerKV { layer: l, ..sample.kv[l - 1].clone() };
            let positions: Vec<usize> = (0..sample.tokens.len()).collect();
            let g = &model.config().geometry;
            let k_rot = rope_apply(&sample.kv[l].k, &positions, g, model.config().rope_base).unwrap();
            sample.attn_out[l] = Some(causal_attention(sample.q[l].as_ref().unwrap(), &k_rot, &sample.kv[l].v, g).unwrap());
        }
        let mut b = bank(&model, echo, 0);
        for p in b.predictors_mut() {
            for kind in [KvKind::Key, KvKind::Value] {
                let w = p.weights_mut(kind);
                w.as_mut_slice().fill(0.0);
                for i in 0..8 {
                    w.set(i, i, 1.0);
                }
            }
        }
        assert_eq!(attention_loss(&model, &b, &sample, Stage2Loss::OMse).unwrap(), 0.0);
        assert_eq!(attention_loss(&model, &b, &sample, Stage2Loss::QkKl).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&b, &sample).unwrap(), 0.0);
        // And the oracle reconstructor reproduces the true attention output.
        let store = evict(&sample.kv, &echo).unwrap();
        let oracle = OraclePredictor::new(sample.kv.clone(), 0);
        let (out, target) = reconstructed_attention(&model, &sample, &store, 1, &oracle).unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn qkkl_freezes_value_maps() {
        let (model, echo, docs) = tiny();
        let b = bank(&model, echo, 3);
        let mut samples = SampleCache::new(&model, &docs, echo).unwrap();
        let cfg = TrainConfig { steps_stage2: 3, ..Default::default() };
        let (out, _) = stage2_train_qkkl(&mut samples, b.clone(), &cfg).unwrap();
        for (before, after) in b.predictors().zip(out.predictors()) {
            assert_eq!(before.w_value, after.w_value);
            assert_ne!(before.w_key, after.w_key);
        }
    }

    #[test]
    fn compounding_variant_runs() {
        let (model, echo, docs) = tiny();
        let b = bank(&model, echo, 4);
        let mut samples = SampleCache::new(&model, &docs, echo).unwrap();
        let cfg = TrainConfig { steps_stage2: 2, propagation: Propagation::Compounding, ..Default::default() };
        let (_, report) = stage2_train(&mut samples, b, &cfg).unwrap();
        assert!(report.records.iter().all(|r| r.loss.is_finite()));
    }
}
