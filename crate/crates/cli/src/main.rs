use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpc_cli::commands::{self, GenerateArgs, RunArgs};
use cpc_cli::report::{load_variant, Report};
use cpc_cli::{Ablation, CliError, Result};

/// Confusing-pair correction experiments on feature datasets.
///
/// Exit codes: 0 success, 1 config error, 2 data error, 3 runtime error.
/// CPC_THREADS caps the number of seeds run in parallel (0 = one per core).
#[derive(Debug, Parser)]
#[command(name = "cpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic source/target pair with truth sidecars.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory. Defaults to the dataset paths in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Data seed; the noise seed becomes seed + 100.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the pipeline for every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory. Defaults to `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base master seed; repetition k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Ablation::None)]
        ablation: Ablation,
        /// Relabel the source with its own prototypes before training.
        #[arg(long)]
        refine_source_first: bool,
        /// Rebuild prototypes from the source at every refinement iteration.
        #[arg(long)]
        reinit_proto_every_iter: bool,
        /// Trim source members as well as target members.
        #[arg(long)]
        trim_source: Option<bool>,
    },
    /// Summarise finished runs, one variant per argument.
    Report {
        /// Run directories or metrics.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Where to write summary.txt, summary.csv and trajectory.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let g = commands::generate(&GenerateArgs { config, out, seed })?;
            println!("wrote {} and {}", g.source.display(), g.target.display());
        }
        Command::Run {
            config,
            out,
            seed,
            ablation,
            refine_source_first,
            reinit_proto_every_iter,
            trim_source,
        } => {
            let dir = commands::run(&RunArgs {
                config,
                out,
                seed,
                ablation,
                refine_source_first,
                reinit_proto_every_iter,
                trim_source,
                threads: commands::threads_from_env()?,
            })?;
            println!("results in {}", dir.display());
        }
        Command::Report { inputs, out } => {
            let variants = inputs
                .iter()
                .map(|p| load_variant(p))
                .collect::<Result<Vec<_>>>()?;
            let report = Report::build(&variants)?;
            report.write(&out)?;
            print!("{}", report.summary_text());
        }
    }
    Ok(())
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
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cpc: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
