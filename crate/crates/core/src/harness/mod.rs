//! Evaluation, benchmarking and run configuration shared by the CLI.

pub mod bench;
pub mod config;
pub mod eval;
pub mod needle;
pub mod report;

pub use bench::{run_bench, select_mode, BenchOutcome, BenchRow};
pub use config::{RunConfig, RunMode};
pub use eval::{evaluate, held_out_output_mse, EvalReport, PredictorSource, WithFeatures};
pub use needle::{run_needle, NeedleRow};
pub use report::write_jsonl;
