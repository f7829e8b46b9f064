//! Needle-in-a-haystack agreement.
//!
//! A short key/value pattern is planted at a relative depth inside generated
//! prose and the key is repeated at the very end. The model is untrained, so
//! what is scored is whether the compressed cache yields the same prediction
//! at the probe as the full cache, not whether the value is recalled.

use serde::Serialize;

use crate::echo::{EchoConfig, EchoForward, OraclePredictor, Reconstructor};
use crate::error::{ensure, Result};
use crate::harness::eval::PredictorSource;
use crate::model::{argmax, Model};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeedleRow {
    pub depth: f64,
    pub length: usize,
    pub trials: usize,
    /// Fraction of trials whose probe argmax matches the full cache.
    pub agreement: f64,
    /// Mean squared logit error at the probe position.
    pub probe_logit_mse: f64,
}

fn needle(trial: usize) -> (Vec<u32>, Vec<u32>) {
    let key = format!("|key{trial:03}=");
    let value = format!("{:06}|", (trial * 7919 + 104_729) % 1_000_000);
    let needle = [key.as_bytes(), value.as_bytes()].concat();
    (needle.iter().map(|&b| u32::from(b)).collect(), key.bytes().map(u32::from).collect())
}

/// Filler of `length` tokens with the needle planted at `depth` and the key
/// appended as probe.
pub fn needle_prompt(seed: u64, length: usize, depth: f64, trial: usize) -> Result<Vec<u32>> {
    ensure!((0.0..=1.0).contains(&depth), Config, "needle depth {depth} outside [0, 1]");
    let (needle, probe) = needle(trial);
    ensure!(length > needle.len() + probe.len(), Config, "needle length {length} too short");
    let filler_len = length - needle.len() - probe.len();
    let mut tokens = crate::corpus::synthetic_tokens(seed.wrapping_add(trial as u64), filler_len);
    let at = ((filler_len as f64) * depth).round() as usize;
    tokens.splice(at..at, needle);
    tokens.extend(probe);
    Ok(tokens)
}

pub fn run_needle(
    model: &Model,
    source: PredictorSource<'_>,
    echo: &EchoConfig,
    length: usize,
    depths: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<NeedleRow>> {
    ensure!(trials > 0, Config, "needle task needs at least one trial");
    let cfg = model.config();
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut agree = 0usize;
        let mut sq = 0.0f64;
        for trial in 0..trials {
            let tokens = needle_prompt(seed, length, depth, trial)?;
            let full = model.prefill(&tokens)?;
            let oracle;
            let recon: &dyn Reconstructor = match source {
                PredictorSource::Fixed(r) => r,
                PredictorSource::Oracle => {
                    oracle = OraclePredictor::new(full.layer_kvs(), echo.local_dim);
                    &oracle
                }
            };
            let mut hook = EchoForward::new(*echo, cfg.n_layers, recon)?;
            let echoed = model.forward_with(&tokens, Some(&mut hook))?;
            let last = tokens.len() - 1;
            let (a, b) = (full.logits.row(last), echoed.logits.row(last));
            agree += usize::from(argmax(a) == argmax(b));
            sq += a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
        }
        rows.push(NeedleRow {
            depth,
            length,
            trials,
            agreement: agree as f64 / trials as f64,
            probe_logit_mse: sq / trials as f64,
        });
    }
    Ok(rows)
}
