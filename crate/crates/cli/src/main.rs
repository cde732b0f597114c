mod inspect;
mod qa;
mod run;
mod tokenizer_cmd;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use medlm_core::qa_harness::Strictness;

#[derive(Parser, Debug)]
#[command(
    name = "medlm",
    version,
    about = "Domain tokenizer, decoder pre-training, QA fine-tuning and evaluation",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON config file, or a run manifest to replay
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every subsystem derives its own seed from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Abort on the first malformed record (default)
    #[arg(long, global = true, conflicts_with = "permissive")]
    pub strict: bool,
    /// Skip malformed records and report them
    #[arg(long, global = true)]
    pub permissive: bool,
    /// Worker count for input loading; results do not depend on it
    #[arg(long, global = true, default_value_t = 1,
          value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
}

impl Global {
    pub fn mode(&self) -> Strictness {
        if self.permissive {
            Strictness::Permissive
        } else {
            Strictness::Strict
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, apply or compare byte-level BPE tokenizers
    #[command(subcommand)]
    Tokenizer(tokenizer_cmd::TokenizerCmd),
    /// Train a decoder on a text corpus
    Pretrain(train::PretrainArgs),
    /// Adapt a checkpoint to a question-answering task
    Finetune(train::FinetuneArgs),
    /// Score a multiple-choice or classification dataset
    Eval(qa::EvalArgs),
    /// Answer free-text questions with a fine-tuned checkpoint
    Generate(qa::GenerateArgs),
    /// Print checkpoint or tokenizer metadata as JSON
    Inspect(inspect::InspectArgs),
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Tokenizer(cmd) => tokenizer_cmd::run(cmd, g),
        Command::Pretrain(a) => train::pretrain(a, g),
        Command::Finetune(a) => train::finetune(a, g),
        Command::Eval(a) => qa::eval(a, g),
        Command::Generate(a) => qa::generate(a, g),
        Command::Inspect(a) => inspect::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<run::Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
