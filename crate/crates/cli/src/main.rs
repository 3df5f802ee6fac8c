use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prunefuse_cli::{
    cmd_distill, cmd_randomization_test, cmd_report, cmd_run, cmd_signals, CliError, Overrides, RunConfig,
};

#[derive(Parser)]
#[command(name = "prunefuse", version, about = "Layer pruning experiments on a small transformer classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seeds (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Replaces the configured strategies (repeatable).
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Grid cells run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides PRUNEFUSE_OUT and the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(
            self.config.as_deref(),
            &Overrides {
                seeds: self.seeds.clone(),
                strategies: self.strategies.clone(),
                steps: self.steps,
                jobs: self.jobs,
                out_dir: self.out_dir.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the dataset x strategy x seed grid and write the report.
    Run(Common),
    /// Write the per-layer signal matrix of a checkpoint as CSV.
    Signals {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        /// Defaults to `signals.csv` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Distill a compressed checkpoint from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Compare forest_fusion against repeated random layer orders.
    RandomizationTest(Common),
    /// Rebuild the report from the records in an output directory.
    Report(Common),
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.load()?;
            cmd_run(&cfg)?;
            println!("report written to {}", cfg.out_dir.display());
        }
        Command::Signals {
            common,
            checkpoint,
            dataset,
            output,
        } => {
            let cfg = common.load()?;
            let output = output.unwrap_or_else(|| cfg.out_dir.join("signals.csv"));
            let rows = cmd_signals(&cfg, &checkpoint, dataset.as_deref(), &output)?;
            println!("{rows} layers written to {}", output.display());
        }
        Command::Distill {
            common,
            student,
            teacher,
            dataset,
        } => {
            let cfg = common.load()?;
            let out = cmd_distill(&cfg, &student, &teacher, dataset.as_deref())?;
            println!(
                "initial kd loss {:.6}; accuracy original {:.4}, compressed {:.4}, distilled {:.4}",
                out.initial_kd, out.row.acc_original, out.row.acc_compressed, out.row.acc_distilled
            );
        }
        Command::RandomizationTest(common) => {
            let cfg = common.load()?;
            cmd_randomization_test(&cfg)?;
            println!("report written to {}", cfg.out_dir.display());
        }
        Command::Report(common) => {
            let cfg = common.load()?;
            let report = cmd_report(&cfg.out_dir, cfg.include_baseline)?;
            println!("{} runs aggregated into {}", report.runs.len(), cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
