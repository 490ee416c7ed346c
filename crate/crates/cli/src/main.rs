use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tapm_cli::config::{Ablation, ExperimentConfig};
use tapm_cli::{CliError, Context, Result};

#[derive(Parser)]
#[command(name = "tapm", version, about = "Transfer attacks from public models: experiment pipeline")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replace outputs left behind by an interrupted stage.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model zoo.
    TrainZoo,
    /// Generate every (source, algorithm) attack on the evaluation set.
    GenAttacks,
    /// Select sources and train the defense and the baselines.
    TrainDefense,
    /// Accuracy grids and the summary tables.
    Eval,
    /// Simple-game payoff matrix, equilibrium and the all-pairs comparison.
    SolveGame,
    /// Perturbation cosine similarity and PCA curves.
    Analyze,
    /// One ablation study.
    Ablate {
        #[arg(long)]
        kind: String,
    },
    /// Every stage, then the configured ablations.
    Run,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let kind = match &cli.command {
        Command::Ablate { kind } => Some(kind.parse::<Ablation>()?),
        _ => None,
    };
    let mut ctx = Context::new(cfg, &cli.out, cli.resume)?;
    match cli.command {
        Command::TrainZoo => ctx.train_zoo(),
        Command::GenAttacks => ctx.gen_attacks(),
        Command::TrainDefense => ctx.train_defense(),
        Command::Eval => ctx.eval(),
        Command::SolveGame => ctx.solve_game(),
        Command::Analyze => ctx.analyze(),
        Command::Ablate { .. } => ctx.ablate(kind.expect("parsed above")),
        Command::Run => ctx.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
