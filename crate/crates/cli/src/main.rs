//! `droplstm`: prepare corpora, train, evaluate, sample and translate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric error, 3 I/O error (including corrupt checkpoints).

mod commands;
mod corpus;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use droplstm::{Error, Preset};

#[derive(Parser, Debug)]
#[command(
    name = "droplstm",
    version,
    about = "Deep LSTM language models with non-recurrent dropout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary from the training split and report token counts.
    Prepare(PrepareArgs),
    /// Train a model, writing checkpoints and metrics to the output directory.
    Train(TrainArgs),
    /// Perplexity of one checkpoint, or of the ensemble of several.
    Eval(EvalArgs),
    /// Sample a continuation of a prefix.
    Sample(SampleArgs),
    /// Beam-decode a target line for every source line.
    Translate(TranslateArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory with `train.txt`/`ptb.train.txt` (or `train.src`/`train.tgt`).
    #[arg(long)]
    data_dir: PathBuf,
    /// Where to write `vocab.txt` and `counts.json` (defaults to the data directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = droplstm::data::DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    /// Parallel corpus: `{split}.src` and `{split}.tgt`.
    #[arg(long)]
    translation: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, required_unless_present = "toy_corpus", conflicts_with = "toy_corpus")]
    data_dir: Option<PathBuf>,
    /// Train on a synthetic corpus of this many tokens (e.g. `1k`) instead of a data directory.
    #[arg(long, value_parser = corpus::parse_count)]
    toy_corpus: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = droplstm::data::DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long)]
    translation: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Hyperparameter sources, lowest precedence first: the preset (medium by
/// default), the `--config` file, then individual flags.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// medium, large or baseline-small.
    #[arg(long)]
    preset: Option<Preset>,
    /// TOML file of configuration fields, e.g. `hidden = 64`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Repeat to evaluate the probability-averaged ensemble.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Splits to score; repeatable. Defaults to every split present except train.
    #[arg(long)]
    split: Vec<String>,
    /// Defaults to the first checkpoint's training value.
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    prefix: String,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// 0 always picks the most probable permitted word.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Words never sampled; repeatable. Giving any replaces the defaults.
    #[arg(long, default_values_t = ["<unk>".to_string(), "N".to_string(), "$".to_string()])]
    forbid: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Target file; standard output if absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    beam_width: usize,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Numeric(_) | Error::Shape { .. } | Error::Index { .. } => 2,
        Error::Io { .. } | Error::Corrupt(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sample(a) => commands::sample(a),
        Command::Translate(a) => commands::translate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
