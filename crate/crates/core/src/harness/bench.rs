//! Decode benchmark under a simulated memory cap.
//!
//! For each prompt length the cache is prefilled in full, then kept full if
//! the full cache (prompt plus decoded tokens) fits the cap and switched to
//! the compressed representation otherwise. A full-cache decode always runs
//! alongside as the fidelity reference; when it would not fit, the row is
//! marked as a simulated out-of-memory for full mode.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::echo::{full_cache_bytes, CacheHandle, CacheMode, EchoConfig, Reconstructor};
use crate::error::{ensure, Result};
use crate::model::{argmax, Model};

/// Full mode iff the full cache fits, otherwise echo.
pub fn select_mode(full_bytes: usize, cap: Option<usize>) -> CacheMode {
    match cap {
        Some(cap) if full_bytes > cap => CacheMode::Echo,
        _ => CacheMode::Full,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub tokens: usize,
    pub decode_tokens: usize,
    pub mode: CacheMode,
    pub memory_cap: Option<usize>,
    /// Full-cache bytes after decoding.
    pub bytes_full: usize,
    /// Bytes held by the selected cache after decoding.
    pub bytes_compressed: usize,
    pub achieved_ratio: f64,
    pub configured_ratio: f64,
    /// Compressed-cache bytes, whichever mode was selected.
    pub echo_bytes: usize,
    pub oom_simulated: bool,
    /// The compressed cache alone exceeds the cap.
    pub echo_over_cap: bool,
    /// Logit MSE of the selected mode's decode against full-cache decode.
    pub output_mse_vs_full: f64,
    pub logit_argmax_agreement: f64,
    pub decode_tokens_per_sec: f64,
    pub full_decode_tokens_per_sec: f64,
    pub echo_decode_tokens_per_sec: f64,
}

/// A bench row plus the selected mode's per-step logits.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub row: BenchRow,
    pub logits: Vec<Vec<f32>>,
    /// Tokens fed during decode (greedy under the full cache).
    pub fed: Vec<u32>,
}

/// Decodes `steps` tokens. With `forced`, those tokens are fed; otherwise
/// greedy decoding starting from `first`. Returns logits, fed tokens and
/// tokens per second.
fn decode(
    model: &Model,
    cache: &mut CacheHandle,
    first: u32,
    steps: usize,
    forced: Option<&[u32]>,
) -> Result<(Vec<Vec<f32>>, Vec<u32>, f64)> {
    let mut logits = Vec::with_capacity(steps);
    let mut fed = Vec::with_capacity(steps);
    let mut next = first;
    let start = Instant::now();
    for step in 0..steps {
        let token = forced.map_or(next, |f| f[step]);
        let out = model.decode_step(cache, token)?;
        next = argmax(&out) as u32;
        fed.push(token);
        logits.push(out);
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok((logits, fed, steps as f64 / secs))
}

pub fn bench_length(
    model: &Model,
    recon: Arc<dyn Reconstructor>,
    echo: &EchoConfig,
    prompt: &[u32],
    decode_tokens: usize,
    memory_cap: Option<usize>,
) -> Result<BenchOutcome> {
    ensure!(decode_tokens > 0, Config, "benchmark needs at least one decode token");
    let cfg = model.config();
    let trace = model.prefill(prompt)?;
    let first = argmax(trace.logits.row(trace.logits.rows() - 1)) as u32;
    let bytes_full = full_cache_bytes(cfg.n_layers, prompt.len() + decode_tokens, cfg.d_kv());
    let mode = select_mode(bytes_full, memory_cap);

    let mut full = CacheHandle::from_trace(&trace)?;
    let (ref_logits, fed, full_tps) = decode(model, &mut full, first, decode_tokens, None)?;

    let mut compressed = CacheHandle::from_trace(&trace)?.switch_mode(CacheMode::Echo, echo, Some(recon))?;
    let (echo_logits, _, echo_tps) = decode(model, &mut compressed, first, decode_tokens, Some(&fed))?;
    let echo_bytes = compressed.bytes();

    let (logits, bytes, tps) = match mode {
        CacheMode::Full => (ref_logits.clone(), full.bytes(), full_tps),
        CacheMode::Echo => (echo_logits, echo_bytes, echo_tps),
    };
    let n = (decode_tokens * cfg.vocab) as f64;
    let mut sq = 0.0f64;
    let mut agree = 0usize;
    for (a, b) in logits.iter().zip(&ref_logits) {
        sq += a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
        agree += usize::from(argmax(a) == argmax(b));
    }
    let row = BenchRow {
        tokens: prompt.len(),
        decode_tokens,
        mode,
        memory_cap,
        bytes_full,
        bytes_compressed: bytes,
        achieved_ratio: bytes as f64 / bytes_full as f64,
        configured_ratio: echo.compute_ratio(),
        echo_bytes,
        oom_simulated: memory_cap.is_some_and(|cap| bytes_full > cap),
        echo_over_cap: memory_cap.is_some_and(|cap| echo_bytes > cap),
        output_mse_vs_full: sq / n,
        logit_argmax_agreement: agree as f64 / decode_tokens as f64,
        decode_tokens_per_sec: tps,
        full_decode_tokens_per_sec: full_tps,
        echo_decode_tokens_per_sec: echo_tps,
    };
    Ok(BenchOutcome { row, logits, fed })
}

/// Worker count from `ECHOKV_THREADS`, defaulting to the machine's
/// available parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("ECHOKV_THREADS") {
        Ok(v) => {
            let n: usize =
                v.trim().parse().map_err(|_| crate::Error::Config(format!("ECHOKV_THREADS={v:?} is not a count")))?;
            ensure!(n >= 1, Config, "ECHOKV_THREADS must be at least 1");
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Benchmarks every length on a pool of `threads` workers; rows come back
/// in the order of `lengths`. Prompts are generated prose seeded by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_bench(
    model: &Model,
    recon: Arc<dyn Reconstructor>,
    echo: &EchoConfig,
    lengths: &[usize],
    decode_tokens: usize,
    memory_cap: Option<usize>,
    seed: u64,
    threads: usize,
) -> Result<Vec<BenchOutcome>> {
    use rayon::prelude::*;
    ensure!(!lengths.is_empty(), Config, "no benchmark lengths given");
    ensure!(lengths.iter().all(|&l| l > 0), Config, "benchmark lengths must be positive");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::Error::Config(format!("cannot start {threads} workers: {e}")))?;
    pool.install(|| {
        lengths
            .par_iter()
            .map(|&len| {
                let prompt = crate::corpus::synthetic_tokens(seed.wrapping_add(len as u64), len);
                bench_length(model, Arc::clone(&recon), echo, &prompt, decode_tokens, memory_cap)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::{BankGeometry, PredictorBank};
    use crate::kernel::AttentionGeometry;
    use crate::model::ModelConfig;

    fn setup() -> (Model, EchoConfig, Arc<dyn Reconstructor>) {
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
        echo.window = 8;
        let bank = PredictorBank::random(BankGeometry::for_model(&cfg, &echo).unwrap(), echo, 1)
            .unwrap()
            .with_retention(2, 8);
        (model, echo, Arc::new(bank))
    }

    #[test]
    fn policy_is_a_threshold() {
        assert_eq!(select_mode(100, None), CacheMode::Full);
        assert_eq!(select_mode(100, Some(100)), CacheMode::Full);
        assert_eq!(select_mode(101, Some(100)), CacheMode::Echo);
    }

    #[test]
    fn short_prompt_stays_full_and_long_switches() {
        let (model, echo, recon) = setup();
        let cap = full_cache_bytes(4, 40, 8);
        let short = crate::corpus::synthetic_tokens(0, 30);
        let out = bench_length(&model, Arc::clone(&recon), &echo, &short, 4, Some(cap)).unwrap();
        assert_eq!(out.row.mode, CacheMode::Full);
        assert_eq!(out.row.achieved_ratio, 1.0);
        assert!(!out.row.oom_simulated);
        assert_eq!(out.row.output_mse_vs_full, 0.0);
        let long = crate::corpus::synthetic_tokens(1, 120);
        let out = bench_length(&model, recon, &echo, &long, 4, Some(cap)).unwrap();
        assert_eq!(out.row.mode, CacheMode::Echo);
        assert!(out.row.oom_simulated);
        assert!(out.row.achieved_ratio < 1.0);
        assert!(out.row.decode_tokens_per_sec > 0.0 && out.row.full_decode_tokens_per_sec > 0.0);
        assert_eq!(out.logits.len(), 4);
    }

    #[test]
    fn echo_over_cap_is_reported_not_fatal() {
        let (model, echo, recon) = setup();
        let prompt = crate::corpus::synthetic_tokens(2, 60);
        let out = bench_length(&model, recon, &echo, &prompt, 2, Some(16)).unwrap();
        assert!(out.row.echo_over_cap && out.row.oom_simulated);
    }

    #[test]
    fn parallel_rows_keep_order() {
        let (model, echo, recon) = setup();
        let rows = run_bench(&model, recon, &echo, &[20, 50, 35], 2, None, 0, 2).unwrap();
        assert_eq!(rows.iter().map(|r| r.row.tokens).collect::<Vec<_>>(), vec![20, 50, 35]);
    }
}
