//! `gen-scenes`: sample curriculum scenes and render their heightmaps.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use hybrid_grasp::rng;
use hybrid_grasp::scene::{render_heightmap, sample_scene};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::lock::OutputLock;

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Run configuration (TOML); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of scenes.
    #[arg(long)]
    pub count: usize,
    /// Curriculum stage to sample.
    #[arg(long, default_value_t = 0)]
    pub stage: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Writes `scene_NNNN.scene.json`, the heightmap `scene_NNNN.pgm` with its
/// `scene_NNNN.json` sidecar, and `manifest.json`. Nothing when `count` is 0.
pub fn run(args: &GenArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    if args.stage >= cfg.world.scene.stages.len() {
        return Err(CliError::Validation(format!(
            "stage {} out of range (have {})",
            args.stage,
            cfg.world.scene.stages.len()
        )));
    }
    let dir = cfg.out_dir(args.out_dir.as_deref())?;
    let _lock = OutputLock::acquire(&dir)?;
    if args.count == 0 {
        return Ok(());
    }
    let mut files = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let scene_seed = rng::derive(seed, &[rng::label::SCENE, i as u64]);
        let scene = sample_scene(&cfg.world.scene, args.stage, scene_seed)?;
        let stem = dir.join(format!("scene_{i:04}"));
        fs::write(stem.with_extension("scene.json"), scene.to_json()?)?;
        render_heightmap(&scene, &cfg.world.grid)?.save(&stem)?;
        files.push(format!("scene_{i:04}"));
    }
    let manifest = json!({
        "config_hash": cfg.hash(),
        "seed": seed,
        "stage": args.stage,
        "scenes": files,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    crate::emit!("wrote {} scenes to {}", args.count, dir.display());
    Ok(())
}
