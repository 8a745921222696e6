//! `plan` and `heatmap`: score a heightmap with a trained model.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use hybrid_grasp::heightmap::Heightmap;
use hybrid_grasp::policy::{infer_grid_timed, plan_grasp, GridTiming, PlannerConfig, RewardMap, Strategy};
use hybrid_grasp::reward_model::RewardModel;
use hybrid_grasp::rng;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::image::write_heatmap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Boltzmann,
    EpsilonGreedy,
    Random,
}

#[derive(Debug, Args)]
pub struct Scoring {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Heightmap `.pgm` (with its `.json` sidecar next to it).
    #[arg(long)]
    pub heightmap: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub scoring: Scoring,
    #[arg(long, value_enum, default_value_t = StrategyArg::Greedy)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Also write the reward heatmap (PNG, plus a PGM next to it).
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Report processing and inference time.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub scoring: Scoring,
    /// Output PNG; the PGM goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

struct Loaded {
    cfg: RunConfig,
    seed: u64,
    model: RewardModel,
    hm: Heightmap,
}

fn heightmap_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm" | "json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn load(s: &Scoring) -> Result<Loaded, CliError> {
    let cfg = RunConfig::load_or_default(s.config.as_deref())?;
    let seed = s.seed.unwrap_or(cfg.seed);
    let model = RewardModel::load(&s.model).map_err(|e| match e {
        hybrid_grasp::Error::Io(io) => CliError::Validation(format!("model {}: {io}", s.model.display())),
        other => other.into(),
    })?;
    let n_prim = cfg.world.planner.gripper.n_primitives();
    if model.spec.n_prim != n_prim {
        return Err(CliError::Validation(format!("model scores {} primitives, gripper has {n_prim}", model.spec.n_prim)));
    }
    let stem = heightmap_stem(&s.heightmap);
    let hm = Heightmap::load(&stem).map_err(|e| match e {
        hybrid_grasp::Error::Io(io) => CliError::Validation(format!("heightmap {}: {io}", stem.display())),
        other => other.into(),
    })?;
    Ok(Loaded { cfg, seed, model, hm })
}

fn grid(l: &Loaded) -> Result<(RewardMap, GridTiming), CliError> {
    Ok(infer_grid_timed(&l.model, &l.hm, l.cfg.policy.n_rot)?)
}

pub fn run_plan(args: &PlanArgs) -> Result<(), CliError> {
    let l = load(&args.scoring)?;
    let strategy = match args.strategy {
        StrategyArg::Greedy => Strategy::Greedy,
        StrategyArg::Boltzmann => Strategy::Boltzmann { temperature: args.temperature },
        StrategyArg::EpsilonGreedy => Strategy::EpsilonGreedy { epsilon: args.epsilon },
        StrategyArg::Random => Strategy::Random,
    };
    strategy.validate()?;
    let start = Instant::now();
    let (map, grid_time) = grid(&l)?;
    let t_plan = Instant::now();
    let mut rng = rng::stream(l.seed, &[rng::label::SELECT]);
    let planner = PlannerConfig {
        bounds: l.cfg.world.planner.bounds.or(Some(l.cfg.world.scene.bin.inner_bounds())),
        ..l.cfg.world.planner.clone()
    };
    let plan = plan_grasp(&l.hm, &map, &strategy, &planner, &mut rng, &mut HashSet::new(), None)?;
    let plan_ms = t_plan.elapsed().as_secs_f64() * 1e3;
    let overall_ms = start.elapsed().as_secs_f64() * 1e3;

    let c = &plan.candidate;
    let a = &c.action;
    let mut out = json!({
        "m": a.m, "x": a.x, "y": a.y, "z": a.z, "a": a.a, "b": a.b, "c": a.c,
        "probability": c.value,
        "accepted": plan.accepted(),
        "rejection": c.rejection,
        "rejections": plan.rejections,
        "uncertain": c.uncertain,
        "clipped_b": c.lateral.as_ref().is_some_and(|l| l.clipped_b),
        "clipped_c": c.lateral.as_ref().is_some_and(|l| l.clipped_c),
        "cell": c.cell,
        "config_hash": l.cfg.hash(),
        "seed": l.seed,
    });
    if args.timing {
        let processing_ms = grid_time.processing_ms + plan_ms;
        out["timing"] = json!({
            "processing_ms": processing_ms,
            "inference_ms": grid_time.inference_ms,
            "overall_ms": overall_ms,
        });
        eprintln!("{:>14} {:>14} {:>14}", "processing ms", "inference ms", "overall ms");
        eprintln!("{processing_ms:>14.1} {:>14.1} {overall_ms:>14.1}", grid_time.inference_ms);
    }
    if let Some(path) = &args.heatmap {
        out["heatmap"] = serde_json::to_value(write_heatmap(path, &map)?)?;
    }
    crate::emit!("{}", serde_json::to_string(&out)?);
    if !plan.accepted() {
        return Err(CliError::Runtime(format!(
            "no collision-free grasp within {} candidates",
            l.cfg.world.planner.rejection_budget
        )));
    }
    Ok(())
}

pub fn run_heatmap(args: &HeatmapArgs) -> Result<(), CliError> {
    let l = load(&args.scoring)?;
    let (map, _) = grid(&l)?;
    let info = write_heatmap(&args.out, &map)?;
    let mut out: Value = serde_json::to_value(&info)?;
    out["config_hash"] = json!(l.cfg.hash());
    out["seed"] = json!(l.seed);
    crate::emit!("{}", serde_json::to_string(&out)?);
    Ok(())
}
