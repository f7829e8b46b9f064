use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use echokv::corpus::split_holdout;
use echokv::echo::checkpoint::{load_bank_for, load_scores, save_bank, save_scores};
use echokv::echo::{
    predictor_param_count, BankGeometry, EchoConfig, FeatureMode, MeanPredictor, PredictorBank, Reconstructor,
};
use echokv::harness::bench::{run_bench, worker_threads};
use echokv::harness::eval::{evaluate, PredictorSource};
use echokv::harness::needle::run_needle;
use echokv::harness::{write_jsonl, RunConfig, RunMode};
use echokv::hybrid::{calibrate_key_channels, HybridConfig};
use echokv::model::Model;
use echokv::trainer::{stage1_train, stage2_train, SampleCache, TrainReport};
use echokv::{Error, Result};

#[derive(Parser)]
#[command(name = "echokv", version, about = "Cross-layer KV-cache compression workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the compression ratio, predictor shape and parameter count.
    Ratio {
        #[arg(long, default_value_t = 1024)]
        dkv: usize,
        #[arg(long, default_value_t = 32)]
        layers: usize,
        #[arg(long)]
        s: usize,
        #[arg(long)]
        local: usize,
    },
    /// Train a predictor bank and write a checkpoint plus loss report.
    Train {
        /// Run only this stage.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        /// Step count for the stage(s) being run.
        #[arg(long)]
        steps: Option<usize>,
        /// Start from this checkpoint instead of a random init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fidelity of the compressed cache on held-out sequences.
    Eval {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Decode benchmark with a simulated memory cap.
    Bench {
        #[command(flatten)]
        predictor: PredictorArgs,
        /// Comma-separated prompt lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Cache budget in bytes.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        decode: Option<usize>,
    },
    /// Planted-needle agreement between full and compressed caches.
    Needle {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Calibrate key-channel scores and write them as a sidecar file.
    Export {
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args)]
struct PredictorArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reconstructor to use; `bank` needs --checkpoint.
    #[arg(long, value_enum)]
    predictor: Option<PredictorKind>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PredictorKind {
    Bank,
    Oracle,
    Zero,
    Mean,
}

impl PredictorKind {
    fn label(self) -> &'static str {
        match self {
            PredictorKind::Bank => "bank",
            PredictorKind::Oracle => "oracle",
            PredictorKind::Zero => "zero",
            PredictorKind::Mean => "mean",
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn load(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common.out.clone().unwrap_or_else(|| cfg.output.clone());
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { cfg, out })
    }

    fn model(&self) -> Result<Model> {
        Model::init(self.cfg.model_config())
    }

    fn echo(&self) -> EchoConfig {
        self.cfg.echo_config()
    }

    fn geometry(&self) -> Result<BankGeometry> {
        BankGeometry::for_model(&self.cfg.model_config(), &self.echo())
    }

    fn load_bank(&self, path: &Path) -> Result<PredictorBank> {
        let echo = self.echo();
        Ok(load_bank_for(path, &self.geometry()?)?.with_retention(echo.sink_tokens, echo.window))
    }
}

/// A resolved reconstructor; the oracle is built per sequence downstream.
enum Resolved {
    Fixed(Box<dyn Reconstructor>),
    Oracle,
}

impl Resolved {
    fn source(&self) -> PredictorSource<'_> {
        match self {
            Resolved::Fixed(r) => PredictorSource::Fixed(r.as_ref()),
            Resolved::Oracle => PredictorSource::Oracle,
        }
    }
}

fn resolve(ctx: &Ctx, model: &Model, args: &PredictorArgs) -> Result<(PredictorKind, Resolved)> {
    let kind = match (args.predictor, &args.checkpoint) {
        (Some(kind), _) => kind,
        (None, Some(_)) => PredictorKind::Bank,
        (None, None) => return Err(Error::Config("pass --checkpoint or --predictor".into())),
    };
    let echo = ctx.echo();
    let resolved = match kind {
        PredictorKind::Bank => {
            let path = args.checkpoint.as_deref().ok_or_else(|| Error::Config("--predictor bank needs --checkpoint".into()))?;
            Resolved::Fixed(Box::new(ctx.load_bank(path)?))
        }
        PredictorKind::Oracle => Resolved::Oracle,
        PredictorKind::Zero => Resolved::Fixed(Box::new(PredictorBank::zeros(ctx.geometry()?, echo)?)),
        PredictorKind::Mean => {
            let docs = ctx.cfg.load_documents()?;
            let (train, _) = split_holdout(&docs)?;
            let traces = train.iter().map(|d| model.prefill(d).map(|t| t.layer_kvs())).collect::<Result<Vec<_>>>()?;
            let fitted = MeanPredictor::fit(traces.iter().map(Vec::as_slice), &echo, model.config().n_layers)?;
            Resolved::Fixed(Box::new(fitted))
        }
    };
    Ok((kind, resolved))
}

fn held_out(ctx: &Ctx) -> Result<Vec<Vec<u32>>> {
    let docs = ctx.cfg.load_documents()?;
    let (_, held) = split_holdout(&docs)?;
    Ok(held.iter().take(ctx.cfg.eval.max_sequences.max(1)).cloned().collect())
}

fn channel_scores(ctx: &Ctx, model: &Model, samples: usize) -> Result<Vec<Vec<f32>>> {
    let docs = ctx.cfg.load_documents()?;
    let (train, _) = split_holdout(&docs)?;
    calibrate_key_channels(model, train, samples)
}

fn hybrid_config(ctx: &Ctx, model: &Model) -> Result<HybridConfig> {
    let section = ctx.cfg.hybrid.clone().unwrap_or_default();
    let scores = match &section.scores {
        Some(path) => load_scores(path)?,
        None => channel_scores(ctx, model, section.calibration_samples)?,
    };
    HybridConfig::new(section.key_keep_ratio, ctx.echo(), scores)
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    stage: u8,
    loss: f64,
    lr: f64,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: &'a str,
    final_checksum: &'a str,
    model_checksum: String,
    steps_stage1: usize,
    steps_stage2: usize,
}

#[derive(Serialize)]
struct StageTiming {
    stage: u8,
    ms: f64,
}

fn train(ctx: &Ctx, stage: Option<u8>, steps: Option<usize>, init: Option<&Path>) -> Result<()> {
    let model = ctx.model()?;
    let echo = ctx.echo();
    let mut tc = ctx.cfg.train_config();
    if let Some(n) = steps {
        match stage {
            Some(1) => tc.steps_stage1 = n,
            Some(_) => tc.steps_stage2 = n,
            None => (tc.steps_stage1, tc.steps_stage2) = (n, n),
        }
    }
    let bank = match init {
        Some(path) => ctx.load_bank(path)?,
        None => PredictorBank::random(ctx.geometry()?, echo, ctx.cfg.seed)?,
    }
    .with_feature_mode(ctx.cfg.features);
    let docs = ctx.cfg.load_documents()?;
    let (train_docs, _) = split_holdout(&docs)?;
    let mut samples = SampleCache::new(&model, train_docs, echo)?;
    let mut report = TrainReport::default();
    let mut bank = bank;
    if stage != Some(2) {
        let (b, r) = stage1_train(&mut samples, bank, &tc)?;
        bank = b;
        report.append(r);
    }
    if stage != Some(1) {
        let (b, r) = stage2_train(&mut samples, bank, &tc)?;
        bank = b;
        report.append(r);
    }
    let ckpt = ctx.out.join("predictor.eckv");
    save_bank(&bank, &ckpt)?;
    let rows: Vec<LossRow> =
        report.records.iter().map(|r| LossRow { step: r.step, stage: r.stage, loss: r.loss, lr: r.lr }).collect();
    write_jsonl(ctx.out.join("train_report.jsonl"), &rows)?;
    let timing: Vec<StageTiming> = report.stage_ms.iter().map(|&(stage, ms)| StageTiming { stage, ms }).collect();
    write_jsonl(ctx.out.join("train_timing.jsonl"), &timing)?;
    let summary = TrainSummary {
        checkpoint: "predictor.eckv",
        final_checksum: &bank.checksum(),
        model_checksum: model.checksum(),
        steps_stage1: report.losses(1).len(),
        steps_stage2: report.losses(2).len(),
    };
    write_jsonl(ctx.out.join("train_summary.jsonl"), &[summary])?;
    println!(
        "trained {} + {} steps, checkpoint {}, checksum {}",
        report.losses(1).len(),
        report.losses(2).len(),
        ckpt.display(),
        bank.checksum()
    );
    Ok(())
}

fn eval(ctx: &Ctx, args: &PredictorArgs, features: Option<&str>, mode: Option<&str>) -> Result<()> {
    let model = ctx.model()?;
    let features: FeatureMode = features.map_or(Ok(ctx.cfg.features), str::parse)?;
    let mode: RunMode = mode.map_or(Ok(ctx.cfg.mode), str::parse)?;
    let (kind, resolved) = resolve(ctx, &model, args)?;
    let hybrid = match mode {
        RunMode::Hybrid => Some(hybrid_config(ctx, &model)?),
        _ => None,
    };
    let seqs = held_out(ctx)?;
    let report =
        evaluate(&model, &seqs, &ctx.echo(), resolved.source(), kind.label(), features, mode, hybrid.as_ref())?;
    write_jsonl(ctx.out.join("eval_report.jsonl"), std::slice::from_ref(&report))?;
    println!(
        "{} {:?}/{:?}: output mse {:.6e}, logit mse {:.6e}, argmax agreement {:.4}",
        report.predictor, report.mode, report.features, report.mean_output_mse, report.logit_mse, report.argmax_agreement
    );
    Ok(())
}

fn bench(
    ctx: &Ctx,
    args: &PredictorArgs,
    lengths: Option<Vec<usize>>,
    cap: Option<usize>,
    decode: Option<usize>,
) -> Result<()> {
    let model = ctx.model()?;
    let (kind, resolved) = resolve(ctx, &model, args)?;
    let recon: Arc<dyn Reconstructor> = match resolved {
        Resolved::Fixed(r) => Arc::from(r),
        Resolved::Oracle => return Err(Error::Config(format!("bench cannot use the {} predictor", kind.label()))),
    };
    let b = &ctx.cfg.bench;
    let lengths = lengths.unwrap_or_else(|| b.lengths.clone());
    let cap = cap.or(b.memory_cap);
    let outcomes = run_bench(
        &model,
        recon,
        &ctx.echo(),
        &lengths,
        decode.unwrap_or(b.decode_tokens),
        cap,
        ctx.cfg.seed,
        worker_threads()?,
    )?;
    let rows: Vec<_> = outcomes.into_iter().map(|o| o.row).collect();
    write_jsonl(ctx.out.join("bench_report.jsonl"), &rows)?;
    for r in &rows {
        println!(
            "{:>6} tokens: {:?} mode, {} / {} bytes (ratio {:.4}), {:.1} tok/s, mse vs full {:.3e}{}",
            r.tokens,
            r.mode,
            r.bytes_compressed,
            r.bytes_full,
            r.achieved_ratio,
            r.decode_tokens_per_sec,
            r.output_mse_vs_full,
            if r.echo_over_cap { ", compressed cache also exceeds cap" } else { "" }
        );
    }
    Ok(())
}

fn needle(ctx: &Ctx, args: &PredictorArgs, length: Option<usize>, trials: Option<usize>) -> Result<()> {
    let model = ctx.model()?;
    let (_, resolved) = resolve(ctx, &model, args)?;
    let n = &ctx.cfg.needle;
    let rows = run_needle(
        &model,
        resolved.source(),
        &ctx.echo(),
        length.unwrap_or(n.length),
        &n.depths,
        trials.unwrap_or(n.trials),
        ctx.cfg.seed,
    )?;
    write_jsonl(ctx.out.join("needle_report.jsonl"), &rows)?;
    for r in &rows {
        println!("depth {:.1}: agreement {:.3}, probe logit mse {:.3e}", r.depth, r.agreement, r.probe_logit_mse);
    }
    Ok(())
}

fn export(ctx: &Ctx, samples: Option<usize>) -> Result<()> {
    let model = ctx.model()?;
    let default = ctx.cfg.hybrid.clone().unwrap_or_default().calibration_samples;
    let scores = channel_scores(ctx, &model, samples.unwrap_or(default))?;
    let path = ctx.out.join("channel_scores.ecks");
    save_scores(&scores, &path)?;
    println!("wrote {} layers of channel scores to {}", scores.len(), path.display());
    Ok(())
}

fn ratio(dkv: usize, layers: usize, s: usize, local: usize) -> Result<()> {
    let echo = EchoConfig::new(s, local, dkv);
    echo.validate_for(layers)?;
    println!("ratio {}", echo.compute_ratio());
    println!("input_dim {}", echo.input_dim());
    println!("output_dim {}", echo.output_dim());
    println!("params {}", predictor_param_count(layers, &echo));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Ratio { dkv, layers, s, local } = cli.command {
        return ratio(dkv, layers, s, local);
    }
    let ctx = Ctx::load(&cli.common)?;
    match &cli.command {
        Command::Ratio { .. } => unreachable!("handled above"),
        Command::Train { stage, steps, init } => train(&ctx, *stage, *steps, init.as_deref()),
        Command::Eval { predictor, features, mode } => eval(&ctx, predictor, features.as_deref(), mode.as_deref()),
        Command::Bench { predictor, lengths, cap, decode } => bench(&ctx, predictor, lengths.clone(), *cap, *decode),
        Command::Needle { predictor, length, trials } => needle(&ctx, predictor, *length, *trials),
        Command::Export { samples } => export(&ctx, *samples),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
