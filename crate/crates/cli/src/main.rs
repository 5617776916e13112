//! `fes` — corpus generation, QA-pair construction, training, evaluation,
//! decoding, and margin analysis from one binary.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fes_core::CoreError;

#[derive(Parser)]
#[command(name = "fes", version, about = "Faithfulness-enhanced summarization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write vocab + train/val/test splits.
    GenCorpus(GenCorpusArgs),
    /// Attach QA pairs: oracle selection on train, ranked pairs elsewhere.
    BuildQa(BuildQaArgs),
    /// Train a model, logging metrics and checkpointing on improvement.
    Train(TrainArgs),
    /// Score a split with ROUGE, QA accuracy, and margin statistics.
    Eval(EvalArgs),
    /// Beam-decode documents and print generated summaries.
    Decode(DecodeArgs),
    /// Export per-token margins as CSV plus a JSON statistics summary.
    AnalyzeMargin(AnalyzeMarginArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output directory for vocab.json and the three .jsonl splits.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    docs: usize,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Args)]
struct BuildQaArgs {
    /// Corpus directory produced by gen-corpus; splits are rewritten in place.
    #[arg(long)]
    corpus: PathBuf,
    /// QA pairs selected per document.
    #[arg(long, default_value_t = 8)]
    k: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for metrics.jsonl, best.ckpt, and last.ckpt.
    #[arg(long)]
    out: PathBuf,
    /// TOML training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a previously saved checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this absolute optimizer step instead of the epoch budget.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, default_value = "full")]
    ablation: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    lambda_m: Option<f64>,
    #[arg(long)]
    margin_power: Option<i32>,
    #[arg(long)]
    margin_delay_steps: Option<u64>,
    #[arg(long)]
    qa_pairs: Option<usize>,
    #[arg(long)]
    validate_every: Option<u64>,
    #[arg(long)]
    lm_epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which held-out split to score.
    #[arg(long, default_value = "test")]
    split: String,
    /// Beam width; the checkpointed configuration's width when omitted.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value = "full")]
    ablation: String,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Decode only this document id.
    #[arg(long)]
    doc: Option<u64>,
    /// Decode at most this many documents.
    #[arg(long, default_value_t = 5)]
    limit: usize,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value = "full")]
    ablation: String,
}

#[derive(Args)]
struct AnalyzeMarginArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Per-token CSV: token_pos, token, P_t, P_lm, m_t, is_entity.
    #[arg(long)]
    csv: PathBuf,
    /// Write the JSON statistics summary here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    ablation: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match cli.command {
        Command::GenCorpus(args) => commands::gen_corpus(args),
        Command::BuildQa(args) => commands::build_qa(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Decode(args) => commands::decode(args),
        Command::AnalyzeMargin(args) => commands::analyze_margin(args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(error_code(&e))
        }
    }
}

fn error_code(e: &CoreError) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(2)
}
