//! Harness commands behind the `gridtalk` binary: generate map suites,
//! train localization models, evaluate them (tables and full-task runs),
//! dump mask trajectories and assemble combined reports.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::CliError;

/// Output root fallback when `--out` is not given.
pub const OUT_ENV: &str = "GRIDTALK_OUT";

#[derive(Debug, Parser)]
#[command(name = "gridtalk", version, about = "Emergent-communication grid localization lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config + output selection shared by most commands.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config file (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.model.t=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root; defaults to $GRIDTALK_OUT or ./gridtalk-out.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    pub fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("gridtalk-out"))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic map suite and its train/valid/test split.
    GenMaps {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one localization model on the generated suite.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Localization accuracy of a checkpoint on one split.
    EvalLoc {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint file to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split's maps to use.
        #[arg(long, default_value = "test")]
        split: String,
        /// Walk length; defaults to the checkpoint's training T.
        #[arg(long)]
        t: Option<usize>,
        /// Number of evaluation episodes.
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
    },
    /// Exact Bayes accuracy rows for the suite's maps.
    UpperBound {
        #[command(flatten)]
        common: CommonArgs,
        /// Walk lengths to evaluate, comma separated.
        #[arg(long, default_value = "0,1,2,3", value_delimiter = ',')]
        t_list: Vec<usize>,
        /// Channel content: obs, obs-act or both.
        #[arg(long, default_value = "both")]
        content: String,
    },
    /// Full-task random-walk evaluation of one or more localizers.
    FullTask {
        #[command(flatten)]
        common: CommonArgs,
        /// Localizer to run: a registry name (bayes, bayes-obs, random,
        /// random-distinct) or model=<checkpoint path>. Repeatable;
        /// defaults to the config's localizer list.
        #[arg(long = "localizer")]
        localizers: Vec<String>,
        /// Which split's maps to run on.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Dump per-step mask values for qualitative inspection.
    DumpMasc {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of episodes to dump.
        #[arg(long, default_value_t = 16)]
        episodes: usize,
    },
    /// Assemble the combined accuracy table from finished runs.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Allow mixing runs from different map suites.
        #[arg(long)]
        mixed_ok: bool,
    },
}

/// Executes a parsed command; errors carry their exit code.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenMaps { common } => commands::gen_maps(&common),
        Command::Train { common } => commands::train(&common),
        Command::EvalLoc { common, checkpoint, split, t, episodes } => {
            commands::eval_loc(&common, &checkpoint, &split, t, episodes)
        }
        Command::UpperBound { common, t_list, content } => {
            commands::upper_bound(&common, &t_list, &content)
        }
        Command::FullTask { common, localizers, split } => {
            commands::full_task(&common, &localizers, &split)
        }
        Command::DumpMasc { common, checkpoint, episodes } => {
            commands::dump_masc(&common, &checkpoint, episodes)
        }
        Command::Report { common, mixed_ok } => commands::report(&common, mixed_ok),
    }
}
