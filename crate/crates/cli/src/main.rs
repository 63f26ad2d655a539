use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use figmine_cli::{load_config, log_event, stages, CliError};

/// Figure mining, hierarchical pretraining, and retrieval evaluation.
#[derive(Parser)]
#[command(name = "figmine", version, arg_required_else_help = true)]
struct Cli {
    /// Run configuration file.
    #[arg(short, long, global = true, default_value = "figmine.toml")]
    config: PathBuf,
    /// Recompute outputs that already exist instead of skipping them.
    #[arg(long, global = true)]
    force: bool,
    /// Override [run].workers from the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose figures into identified panels via multi-view voting.
    ParsePanels {
        /// Keep raw per-view proposals as audit sidecars.
        #[arg(long)]
        keep_raw: bool,
    },
    /// Route caption fragments to panels and describe bare panels.
    AssociateText,
    /// Mine marker- and caption-driven regions inside photographic panels.
    MineRegions,
    /// Clip, filter, suppress, and merge mined region boxes.
    PostprocessBoxes,
    /// Assemble the validated corpus manifest and feature tables.
    BuildCorpus {
        /// Generate a synthetic corpus from this spec file instead of
        /// assembling one from pipeline sidecars.
        #[arg(long, value_name = "SPEC")]
        synthetic: Option<PathBuf>,
    },
    /// Train the dual encoder on the training split.
    Pretrain,
    /// Cross-modal retrieval metrics on the held-out split.
    EvalRetrieval,
    /// Aggregate stage statistics into one summary.
    Report,
    /// Run every stage in order.
    All {
        #[arg(long)]
        keep_raw: bool,
        #[arg(long, value_name = "SPEC")]
        synthetic: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(workers) = cli.workers {
        cfg.run.workers = workers;
    }
    match &cli.command {
        Command::ParsePanels { keep_raw } => stages::parse_panels(&cfg, cli.force, *keep_raw),
        Command::AssociateText => stages::associate_text(&cfg, cli.force),
        Command::MineRegions => stages::mine_regions(&cfg, cli.force),
        Command::PostprocessBoxes => stages::postprocess_boxes(&cfg, cli.force),
        Command::BuildCorpus { synthetic } => {
            stages::build_corpus(&cfg, cli.force, synthetic.as_deref())
        }
        Command::Pretrain => stages::pretrain(&cfg, cli.force),
        Command::EvalRetrieval => stages::eval_retrieval(&cfg, cli.force),
        Command::Report => stages::report(&cfg),
        Command::All { keep_raw, synthetic } => {
            stages::run_all(&cfg, cli.force, *keep_raw, synthetic.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log_event("cli", None, "error", Some(&err.to_string()), None);
            ExitCode::from(err.exit_code())
        }
    }
}
