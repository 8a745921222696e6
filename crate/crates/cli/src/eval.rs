//! `eval`: grasp rates over bin-picking scenarios, as a table and CSV.

use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use hybrid_grasp::policy::{evaluate_grasp_rate, EvalPolicy, EvalReport, GripperVariant, Scenario, WorldConfig};
use hybrid_grasp::reward_model::RewardModel;
use hybrid_grasp::rng;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::lock::OutputLock;

/// Scenario names, in report order.
pub const SCENARIOS: [&str; 7] = ["1-of-1", "1-of-5", "5-of-20", "20-of-30", "planar", "short", "short-planar"];

/// Single objects in the 1-of-1 row keep this distance from the walls.
pub const ISOLATED_CLEARANCE: f64 = 0.06;

/// Build a named scenario. Mixed bins draw from the kinds of the third
/// curriculum stage (or the last one when there are fewer).
pub fn scenario(name: &str, world: &WorldConfig) -> Result<Scenario, CliError> {
    let stages = &world.scene.stages;
    let mixed = stages[2.min(stages.len() - 1)].kinds.clone();
    let base = |n, m| Scenario::new(name, n, m, &mixed);
    let sc = match name {
        "1-of-1" => Scenario { wall_clearance: ISOLATED_CLEARANCE, ..Scenario::new(name, 1, 1, &stages[0].kinds) },
        "1-of-5" => base(1, 5),
        "5-of-20" => base(5, 20),
        "20-of-30" => base(20, 30),
        "planar" => Scenario { adaption: false, ..base(5, 20) },
        "short" => Scenario { gripper: GripperVariant::Short, ..base(5, 20) },
        "short-planar" => Scenario { gripper: GripperVariant::Short, adaption: false, ..base(5, 20) },
        _ => return Err(CliError::Validation(format!("unknown scenario {name:?}; known: {}", SCENARIOS.join(", ")))),
    };
    Ok(sc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Model,
    Random,
    Oracle,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Required for the model policy.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario to run; repeatable. Defaults to the configured list.
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Model)]
    pub policy: PolicyArg,
    /// Bins per scenario; defaults to the configured count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Write `eval.csv` here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub const CSV_HEADER: &str =
    "scenario,policy,gripper,adaption,trials,attempts,successes,rate,ci_low,ci_high,collisions,unplanned,config_hash,seed";

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let trials = args.trials.unwrap_or(cfg.eval.trials);
    if trials == 0 {
        return Err(CliError::Validation("--trials must be positive".into()));
    }
    let names = if args.scenarios.is_empty() { &cfg.eval.scenarios } else { &args.scenarios };
    let scenarios: Vec<Scenario> = names
        .iter()
        .map(|n| scenario(n, &cfg.world).map(|s| Scenario { policy: policy(args.policy), ..s }))
        .collect::<Result<_, _>>()?;
    let model = match (&args.model, args.policy) {
        (Some(p), _) => Some(RewardModel::load(p).map_err(|e| match e {
            hybrid_grasp::Error::Io(io) => CliError::Validation(format!("model {}: {io}", p.display())),
            other => other.into(),
        })?),
        (None, PolicyArg::Model) => return Err(CliError::Validation("the model policy needs --model".into())),
        (None, _) => None,
    };
    let lock = args.out_dir.as_deref().map(OutputLock::acquire).transpose()?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    crate::emit!(
        "{:<14} {:<7} {:>6} {:>8} {:>9} {:>7}  {:<15} {:>10}",
        "scenario", "policy", "trials", "attempts", "successes", "rate", "95% CI", "collisions"
    );
    for (i, sc) in scenarios.iter().enumerate() {
        let s = rng::derive(seed, &[rng::label::EVAL, i as u64]);
        let r = evaluate_grasp_rate(model.as_ref(), sc, &cfg.world, cfg.policy.n_rot, cfg.policy.top_k, trials, s)?;
        crate::emit!(
            "{:<14} {:<7} {:>6} {:>8} {:>9} {:>6.1}%  [{:>5.1}, {:>5.1}]% {:>10}",
            r.scenario,
            policy_name(args.policy),
            r.trials,
            r.attempts,
            r.successes,
            100.0 * r.rate,
            100.0 * r.ci_low,
            100.0 * r.ci_high,
            r.collisions
        );
        rows.push(csv_row(&r, sc, args.policy, &hash, seed));
    }
    if let (Some(dir), Some(_)) = (&args.out_dir, &lock) {
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(dir.join("eval.csv"), text)?;
    }
    Ok(())
}

fn policy(p: PolicyArg) -> EvalPolicy {
    match p {
        PolicyArg::Model => EvalPolicy::Model,
        PolicyArg::Random => EvalPolicy::Random,
        PolicyArg::Oracle => EvalPolicy::Oracle,
    }
}

fn policy_name(p: PolicyArg) -> &'static str {
    match p {
        PolicyArg::Model => "model",
        PolicyArg::Random => "random",
        PolicyArg::Oracle => "oracle",
    }
}

fn csv_row(r: &EvalReport, sc: &Scenario, p: PolicyArg, hash: &str, seed: u64) -> String {
    let gripper = match sc.gripper {
        GripperVariant::Normal => "normal",
        GripperVariant::Short => "short",
    };
    format!(
        "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{}",
        r.scenario,
        policy_name(p),
        gripper,
        sc.adaption,
        r.trials,
        r.attempts,
        r.successes,
        r.rate,
        r.ci_low,
        r.ci_high,
        r.collisions,
        r.unplanned,
        hash,
        seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_scenario_builds() {
        let world = WorldConfig::default();
        for name in SCENARIOS {
            let sc = scenario(name, &world).unwrap();
            assert!(sc.n_grasp <= sc.m_objects);
        }
        assert!(scenario("3-of-2", &world).is_err());
    }
}
