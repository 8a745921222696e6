//! `train`: the self-supervised data-collection and training loop.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use hybrid_grasp::policy::{artifact_paths, resume_training, run_training};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::lock::OutputLock;

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop (with a checkpoint) after this many attempts in total.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let dir = cfg.out_dir(args.out_dir.as_deref())?;
    let _lock = OutputLock::acquire(&dir)?;
    let hash = cfg.hash();
    let setup = cfg.setup(hash.clone());
    let [model_path, dataset_path, metrics_path, checkpoint_path] = artifact_paths(&dir);
    let run = if args.resume {
        resume_training(&setup, seed, &dir, args.stop_after)?
    } else {
        if checkpoint_path.exists() {
            return Err(CliError::Validation(format!(
                "{} already holds a run; pass --resume to continue it",
                dir.display()
            )));
        }
        let record = json!({ "config_hash": hash, "seed": seed, "config": cfg });
        fs::write(dir.join("run_config.json"), serde_json::to_vec_pretty(&record)?)?;
        run_training(&setup, seed, Some(&dir), args.stop_after)?
    };
    let executed = run.dataset.iter().filter(|r| r.executed).count();
    let successes = run.dataset.iter().filter(|r| r.reward == 1).count();
    let summary = json!({
        "config_hash": hash,
        "seed": seed,
        "attempts": run.dataset.len(),
        "executed": executed,
        "successes": successes,
        "stage": run.state.stage,
        "final_val_bce": run.metrics.last().map(|m| m.val_bce),
        "model": model_path,
        "dataset": dataset_path,
        "metrics": metrics_path,
        "checkpoint": checkpoint_path,
    });
    crate::emit!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
