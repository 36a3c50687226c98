//! `polyparse` command-line tool.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// A mistake in how the tool was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "polyparse", version, about = "Translate text into well-formed component sequences")]
pub struct Cli {
    /// TOML file of flag values; flags on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Worker threads for independent input lines and training batches.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,

    /// JSON diagnostics on stderr.
    #[arg(long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Compile the target side of one or more corpora into a graph file.
    BuildGraph(BuildGraphArgs),
    /// Learn subword merges from a corpus.
    LearnBpe(LearnBpeArgs),
    /// Train a lexical or neural scorer.
    Train(TrainArgs),
    /// Decode input lines (one per line) into their best paths.
    Decode(DecodeArgs),
    /// Decode input lines into ranked lists (k defaults to 10).
    Kbest(DecodeArgs),
    /// Compute Acc@1, Acc@10 and MRR on a test corpus.
    Eval(EvalArgs),
    /// Answer one free-text question, grouped by output language.
    Query(QueryArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TagModeArg {
    None,
    Column,
    Filename,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SideArg {
    Source,
    Target,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    Lexical,
    Neural,
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// Corpus files (`text TAB components [TAB tag]`).
    #[arg(long = "corpus", value_name = "PATH", required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Where language tags come from.
    #[arg(long, value_enum, default_value = "none")]
    pub tag_mode: TagModeArg,
    #[command(flatten)]
    pub bpe: BpeArgs,
}

#[derive(Args, Debug)]
pub struct BpeArgs {
    /// Subword merges to apply.
    #[arg(long, value_name = "PATH")]
    pub bpe: Option<PathBuf>,
    /// Which side the merges apply to.
    #[arg(long, value_enum, default_value = "both")]
    pub bpe_side: SideArg,
}

#[derive(Args, Debug)]
pub struct BuildGraphArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LearnBpeArgs {
    #[arg(long = "corpus", value_name = "PATH", required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub tag_mode: TagModeArg,
    #[arg(long)]
    pub merges: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub side: SideArg,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "lexical")]
    pub scorer: ScorerArg,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,

    /// EM iterations.
    #[arg(long, default_value_t = polyparse::model1::DEFAULT_ITERATIONS)]
    pub iterations: usize,
    /// Leave the NULL token out of the alignment model.
    #[arg(long)]
    pub no_null: bool,
    /// Probability of unseen pairs.
    #[arg(long, default_value_t = polyparse::model1::DEFAULT_FLOOR)]
    pub floor: f64,

    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Gradient-norm clipping threshold; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 64)]
    pub embedding: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 64)]
    pub attention: usize,
    #[arg(long, default_value_t = 64)]
    pub mlp: usize,
    /// Add the lexical bias term (needs --lexical-model).
    #[arg(long)]
    pub bias: bool,
    /// Enable copying from the input.
    #[arg(long)]
    pub copy: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Lexical model whose inverse table feeds the bias term.
    #[arg(long, value_name = "PATH")]
    pub lexical_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScorerArgs {
    #[arg(long, value_name = "PATH")]
    pub graph: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "lexical")]
    pub scorer: ScorerArg,
    /// Lexical model or neural parameter file.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Lexical model for a neural scorer trained with --bias.
    #[arg(long, value_name = "PATH")]
    pub lexical_model: Option<PathBuf>,
    /// Decode into this language only.
    #[arg(long, value_name = "TAG")]
    pub language: Option<String>,
    #[arg(long, default_value_t = polyparse::neural_decoder::DEFAULT_BEAM)]
    pub beam: usize,
    /// Start the lexical running sums at zero instead of the NULL probabilities.
    #[arg(long)]
    pub no_null_init: bool,
    #[command(flatten)]
    pub bpe: BpeArgs,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Input file, one sentence per line; stdin when absent.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// List length; 1 for decode and 10 for kbest when absent.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Test corpus with gold sequences.
    #[arg(long = "test", value_name = "PATH", required = true, num_args = 1..)]
    pub test: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub tag_mode: TagModeArg,
    /// Output of `decode`/`kbest` to score instead of decoding again.
    #[arg(long, value_name = "PATH")]
    pub decoded: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Ignore a leading language token when matching.
    #[arg(long)]
    pub strip_language: bool,
    /// Undo subword splitting before matching.
    #[arg(long)]
    pub join_subwords: bool,
    /// Print a table instead of `metric TAB value` lines.
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// The question.
    #[arg(required = true, num_args = 1..)]
    pub text: Vec<String>,
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    cmd.build();
    cmd
}

fn parse(args: Vec<OsString>) -> anyhow::Result<Result<Cli, clap::Error>> {
    let cmd = command();
    let args = match config::config_path(&args) {
        Some(path) => config::merge(&cmd, args, &config::load(path.as_ref())?)?,
        None => args,
    };
    Ok(cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<polyparse::Error>() {
        Some(e) if e.is_search_failure() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(e) => {
            eprintln!("polyparse: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("polyparse: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
