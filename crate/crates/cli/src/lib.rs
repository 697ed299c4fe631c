//! The `medleysep` command line: `mix`, `train`, `finetune`, `eval`,
//! `oracle` and `report`.

pub mod config;
pub mod error;
pub mod eval;
pub mod mix;
pub mod report;
pub mod train;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use medleysep_core::masks::MaskKind;

pub use error::{CliError, EXIT_CONFIG, EXIT_IO, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "medleysep", version, about = "Separation of multiple singing voices: mixture construction, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the commands. Each overrides the matching config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Ibm,
    Irm,
    Cirm,
}

impl From<MaskArg> for MaskKind {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Ibm => MaskKind::Ibm,
            MaskArg::Irm => MaskKind::Irm,
            MaskArg::Cirm => MaskKind::Cirm,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write dynamically mixed examples, their stems and provenance.
    Mix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_examples: Option<usize>,
        /// unison, duet or main_vs_rest
        #[arg(long)]
        category: Option<String>,
    },
    /// Train a backbone separator.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Jointly train iSRNet with a pre-trained backbone.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Backbone checkpoint to start from.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Heuristic frequency boundary: 1500, 3000, 4500 or 6000.
        #[arg(long)]
        boundary_hz: Option<u32>,
    },
    /// Score a trained model on MedleyVox-format segments.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Also score after a 16-bit save and load.
        #[arg(long)]
        clipped: bool,
    },
    /// Score oracle time-frequency masks.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        mask: MaskArg,
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        clipped: bool,
    },
    /// Summarise evaluation records or training logs.
    Report {
        /// `records.jsonl` files, evaluation directories or run directories.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

/// Parses arguments, runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            if e.to_string().contains("Usage:") {
                return EXIT_CONFIG;
            }
            let mut cmd = Cli::command();
            cmd.build();
            let sub = args.get(1).and_then(|a| a.to_str()).and_then(|a| cmd.find_subcommand(a));
            let usage = match sub {
                Some(s) => s.clone().render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            return EXIT_CONFIG;
        }
    };
    let result = match cli.command {
        Command::Mix {
            common,
            n_examples,
            category,
        } => mix::cmd_mix(&common, n_examples, category.as_deref()),
        Command::Train { common, steps, resume } => train::cmd_train(&common, steps, resume.as_deref(), None),
        Command::Finetune {
            common,
            steps,
            resume,
            backbone,
            boundary_hz,
        } => train::cmd_train(
            &common,
            steps,
            resume.as_deref(),
            Some(train::FinetuneFlags { backbone, boundary_hz }),
        ),
        Command::Eval {
            common,
            checkpoint,
            metadata,
            clipped,
        } => eval::cmd_eval(&common, eval::Target::Checkpoint(checkpoint), metadata, clipped).map(|_| ()),
        Command::Oracle {
            common,
            mask,
            metadata,
            clipped,
        } => eval::cmd_eval(&common, eval::Target::Oracle(mask.into()), metadata, clipped).map(|_| ()),
        Command::Report { paths } => report::cmd_report(&paths),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
