//! `hgrasp`: scene generation, training, planning, evaluation and run
//! statistics for the hybrid grasp planner.
//!
//! Exit status: 0 on success, 1 for invalid input, 2 for runtime failures.
//! `HGRASP_THREADS` caps the worker threads.

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}
pub(crate) use emit;

mod config;
mod error;
mod eval;
mod gen;
mod image;
mod lock;
mod plan;
mod stats;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

pub const THREADS_ENV: &str = "HGRASP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hgrasp", version, about = "Hybrid learned/model-based 6-DoF grasp planning in a simulated bin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample curriculum scenes and render their heightmaps.
    GenScenes(gen::GenArgs),
    /// Run the self-supervised training loop.
    Train(train::TrainArgs),
    /// Plan one grasp on a heightmap.
    Plan(plan::PlanArgs),
    /// Evaluate grasp rates over bin-picking scenarios.
    Eval(eval::EvalArgs),
    /// Write the reward heatmap of a heightmap.
    Heatmap(plan::HeatmapArgs),
    /// Summarize a training run.
    Stats(stats::StatsArgs),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenScenes(a) => gen::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Plan(a) => plan::run_plan(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Heatmap(a) => plan::run_heatmap(&a),
        Command::Stats(a) => stats::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hgrasp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
