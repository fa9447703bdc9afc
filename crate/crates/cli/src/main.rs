//! `perspectra` command-line frontend.
//!
//! Runtime failures print one JSON line `{"error": {"kind", "message"}}` to
//! stderr and exit with status 1; usage errors exit with status 2.

mod artifacts;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use perspectra_core::promptkit::Strategy;
use perspectra_core::Split;
use serde_json::json;

use crate::commands::{Context, EvalSummArgs, OptimizeArgs, SummarizeArgs};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "perspectra", version)]
#[command(about = "Perspective-aware summarization toolkit for CQA threads")]
struct Cli {
    /// Kit config file (defaults to ./perspectra.config.json when present)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a canonical corpus file and store it in the data directory
    Ingest {
        /// Corpus file, one JSON thread per line
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Split tag: train, validation or test
        #[arg(long)]
        split: Split,
    },
    /// Print per-perspective span counts and percentages for a stored split
    Stats {
        /// Split tag: train, validation or test
        #[arg(long)]
        split: Split,
    },
    /// Ensemble token probabilities and decode perspective spans
    PredictSpans {
        /// Directory of probability files (*.jsonl), or a comma-separated
        /// list of configured token-probs endpoint names
        #[arg(long, value_name = "DIR|NAMES")]
        probs: String,
        /// Span file to write
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Stored split whose answers are tagged
        #[arg(long, default_value = "validation")]
        split: Split,
    },
    /// Score predicted spans against a gold corpus file
    EvalSpans {
        /// Span file from predict-spans
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        /// Canonical corpus file with gold spans
        #[arg(long, value_name = "PATH")]
        gold: PathBuf,
        /// JSON report to write
        #[arg(long, value_name = "PATH")]
        report: PathBuf,
    },
    /// Generate one summary per (thread, perspective)
    Summarize {
        /// Prompt strategy: vanilla, cot_keyphrase or cot_guide
        #[arg(long)]
        strategy: Strategy,
        /// Optimized prompt program (e.g. best_prompt.json from optimize)
        #[arg(long, value_name = "PATH")]
        prompt: Option<PathBuf>,
        /// Generation endpoint name (defaults to the first configured one)
        #[arg(long, value_name = "NAME")]
        endpoint: Option<String>,
        /// Span file to summarize instead of the gold spans
        #[arg(long, value_name = "PATH")]
        spans: Option<PathBuf>,
        /// Summaries file to write
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Stored split to summarize
        #[arg(long, default_value = "validation")]
        split: Split,
    },
    /// Score summaries against references
    EvalSumm {
        /// Summaries file
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        /// Reference summaries file or canonical corpus file
        #[arg(long = "ref", value_name = "PATH")]
        reference: PathBuf,
        /// JSON report to write
        #[arg(long, value_name = "PATH")]
        report: PathBuf,
        /// Embedding endpoint name for BERTScore (defaults to the first configured one)
        #[arg(long, value_name = "NAME")]
        embedding_endpoint: Option<String>,
        /// Factuality endpoint name; factuality fields stay null without it
        #[arg(long, value_name = "NAME")]
        factuality_endpoint: Option<String>,
    },
    /// Search prompt instructions against the dev split
    Optimize {
        /// Prompt strategy: vanilla, cot_keyphrase or cot_guide
        #[arg(long, default_value = "cot_guide")]
        strategy: Strategy,
        /// Starting prompt program
        #[arg(long, value_name = "PATH")]
        prompt: Option<PathBuf>,
        /// Number of optimization iterations
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// Instruction variants proposed per iteration (3 to 5)
        #[arg(long, default_value_t = 4)]
        variants: usize,
        /// Summaries per scoring minibatch
        #[arg(long, default_value_t = 8)]
        minibatch: usize,
        /// Re-score leaders on the full dev split every N iterations (0 disables)
        #[arg(long, default_value_t = 5)]
        full_eval_period: usize,
        /// Minibatch sampling seed
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Best prompt program to write
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Per-iteration trace file to write
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Generation endpoint for task prompts
        #[arg(long, value_name = "NAME")]
        endpoint: Option<String>,
        /// Generation endpoint for instruction proposals (defaults to --endpoint)
        #[arg(long, value_name = "NAME")]
        meta_endpoint: Option<String>,
        /// Embedding endpoint for BERTScore
        #[arg(long, value_name = "NAME")]
        embedding_endpoint: Option<String>,
        /// Stored dev split
        #[arg(long, default_value = "validation")]
        split: Split,
    },
    /// Write chat-format fine-tuning records plus a training sidecar
    ExportSft {
        /// Stored split to export
        #[arg(long, default_value = "train")]
        split: Split,
        /// Prompt strategy used to render the user message
        #[arg(long)]
        strategy: Strategy,
        /// Prompt program to render with
        #[arg(long, value_name = "PATH")]
        prompt: Option<PathBuf>,
        /// JSONL file to write; the sidecar goes next to it as <stem>.meta.json
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Context::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { input, split } => commands::ingest(&ctx, &input, split),
        Command::Stats { split } => commands::stats(&ctx, split),
        Command::PredictSpans { probs, out, split } => commands::predict_spans(&ctx, split, &probs, &out).await,
        Command::EvalSpans { pred, gold, report } => commands::eval_spans(&pred, &gold, &report),
        Command::Summarize {
            strategy,
            prompt,
            endpoint,
            spans,
            out,
            split,
        } => {
            commands::summarize(
                &ctx,
                SummarizeArgs {
                    split,
                    strategy,
                    prompt: prompt.as_deref(),
                    endpoint: endpoint.as_deref(),
                    spans: spans.as_deref(),
                    out: &out,
                },
            )
            .await
        }
        Command::EvalSumm {
            pred,
            reference,
            report,
            embedding_endpoint,
            factuality_endpoint,
        } => {
            commands::eval_summ(
                &ctx,
                EvalSummArgs {
                    pred: &pred,
                    reference: &reference,
                    report: &report,
                    embedding_endpoint: embedding_endpoint.as_deref(),
                    factuality_endpoint: factuality_endpoint.as_deref(),
                },
            )
            .await
        }
        Command::Optimize {
            strategy,
            prompt,
            iterations,
            variants,
            minibatch,
            full_eval_period,
            seed,
            out,
            trace,
            endpoint,
            meta_endpoint,
            embedding_endpoint,
            split,
        } => {
            commands::run_optimize(
                &ctx,
                OptimizeArgs {
                    split,
                    strategy,
                    prompt: prompt.as_deref(),
                    endpoint: endpoint.as_deref(),
                    meta_endpoint: meta_endpoint.as_deref(),
                    embedding_endpoint: embedding_endpoint.as_deref(),
                    iterations,
                    variants,
                    minibatch,
                    full_eval_period,
                    seed,
                    out: &out,
                    trace: trace.as_deref(),
                },
            )
            .await
        }
        Command::ExportSft {
            split,
            strategy,
            prompt,
            out,
        } => commands::run_export(&ctx, split, strategy, prompt.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::from(1)
        }
    }
}
