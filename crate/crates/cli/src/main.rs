use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use querywise::runner::{compare_runs, run_pipeline, ExperimentConfig, RunOptions, Stage};

const DEVICE_VAR: &str = "QUERYWISE_DEVICE";

const EXIT_USAGE: u8 = 2;
const EXIT_COMPARE: u8 = 7;

#[derive(Parser)]
#[command(name = "querywise", version, about = "Hard-label model extraction under a query budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the victim model.
    TrainVictim(RunArgs),
    /// Select, query and train the anchor.
    Steal(RunArgs),
    /// Train the student against the anchor and EMA teacher.
    Distill(RunArgs),
    /// Score victim, anchor and thief on the held-out test set.
    Eval(RunArgs),
    /// All stages in order.
    Run(RunArgs),
    /// Tabulate the metrics of finished runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the default experiment config as TOML.
    InitConfig,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the attack seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse stages already completed in the run directory.
    #[arg(long)]
    resume: bool,
    /// One worker thread and a logical query clock.
    #[arg(long)]
    deterministic: bool,
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if !d.is_empty() && !d.eq_ignore_ascii_case("cpu") => {
            anyhow::bail!("{DEVICE_VAR}={d}: only \"cpu\" is supported")
        }
        _ => Ok(()),
    }
}

fn load_config(args: &RunArgs) -> anyhow::Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.name, cfg.seed)));
    let opts = RunOptions {
        out_dir,
        resume: args.resume,
        deterministic: args.deterministic,
    };
    Ok((cfg, opts))
}

fn run(args: &RunArgs, until: Stage) -> ExitCode {
    if let Err(e) = check_device() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    let (cfg, opts) = match load_config(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run_pipeline(&cfg, &opts, until) {
        Ok(summary) => {
            let done: Vec<String> = summary.manifest.stages_completed.iter().map(|s| s.to_string()).collect();
            println!("run directory: {}", summary.out_dir.display());
            println!("stages complete: {}", done.join(", "));
            if summary.reports.is_some() {
                if let Ok(table) = std::fs::read_to_string(summary.out_dir.join("report.txt")) {
                    print!("{table}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::TrainVictim(a) => run(&a, Stage::Victim),
        Command::Steal(a) => run(&a, Stage::Steal),
        Command::Distill(a) => run(&a, Stage::Distill),
        Command::Eval(a) | Command::Run(a) => run(&a, Stage::Eval),
        Command::Compare { runs } => match compare_runs(&runs) {
            Ok(table) => {
                print!("{}", table.render());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_COMPARE)
            }
        },
        Command::InitConfig => match ExperimentConfig::default().to_toml() {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
