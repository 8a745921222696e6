//! Grasp-rate evaluation: grasp `n` objects out of a bin of `m` without
//! putting any back, and report successes over attempts with a binomial
//! confidence interval.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::planner::{evaluate_cell, occupied_cells, plan_grasp, PlannedGrasp, PlannerConfig};
use super::training::WorldConfig;
use super::{infer_grid, CellIndex, MapGeometry, RewardMap, Strategy};
use crate::collision::GripperGeometry;
use crate::error::{arg, Result};
use crate::grasp_sim::{execute_grasp, GraspEvent};
use crate::heightmap::Heightmap;
use crate::reward_model::RewardModel;
use crate::rng::{self, label};
use crate::scene::{render_heightmap, sample_scene_with, ObjectKind, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperVariant {
    Normal,
    Short,
}

impl GripperVariant {
    pub fn geometry(self, normal: &GripperGeometry) -> GripperGeometry {
        match self {
            GripperVariant::Normal => normal.clone(),
            GripperVariant::Short => GripperGeometry { d_l: GripperGeometry::short().d_l, ..normal.clone() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    /// Greedy on the model's grid, top-k retries after a failure.
    Model,
    /// Uniform over occupied cells.
    Random,
    /// Simulates candidates on each object and executes the first success.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub n_grasp: usize,
    pub m_objects: usize,
    pub kinds: Vec<ObjectKind>,
    pub gripper: GripperVariant,
    pub adaption: bool,
    pub policy: EvalPolicy,
    /// Attempts allowed per trial.
    pub attempt_budget: usize,
    /// Objects are placed at least this far from the walls, meters.
    #[serde(default)]
    pub wall_clearance: f64,
}

impl Scenario {
    pub fn new(name: &str, n_grasp: usize, m_objects: usize, kinds: &[ObjectKind]) -> Self {
        Self {
            name: name.into(),
            n_grasp,
            m_objects,
            kinds: kinds.to_vec(),
            gripper: GripperVariant::Normal,
            adaption: true,
            policy: EvalPolicy::Model,
            attempt_budget: 2 * n_grasp + 2,
            wall_clearance: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_grasp == 0 || self.n_grasp > self.m_objects || self.kinds.is_empty() || self.attempt_budget < self.n_grasp
            || !(self.wall_clearance >= 0.0)
        {
            return arg(format!("scenario {} is malformed", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub trials: usize,
    pub attempts: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Executed grasps that ended in a collision abort.
    pub collisions: usize,
    /// Attempts where every candidate was rejected.
    pub unplanned: usize,
}

/// Wilson score interval at 95 %.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = successes as f64 / n;
    let den = 1.0 + z * z / n;
    let mid = (p + z * z / (2.0 * n)) / den;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / den;
    ((mid - half).max(0.0), (mid + half).min(1.0))
}

/// Candidate through each object's center for every yaw and primitive that
/// would succeed in simulation; objects in id order.
fn oracle_plan(hm: &Heightmap, scene: &Scene, geometry: &MapGeometry, cfg: &PlannerConfig, seed: u64) -> Result<Option<PlannedGrasp>> {
    let map = RewardMap { geometry: geometry.clone(), values: vec![1.0; geometry.len()] };
    for obj in &scene.objects {
        for k in 0..geometry.n_rot {
            let Some(cell) = geometry.locate(obj.pose.x, obj.pose.y, geometry.angle(k), 0) else { continue };
            for m in 0..geometry.n_prim {
                let idx = geometry.linear(CellIndex { m, ..cell });
                let cand = evaluate_cell(hm, &map, idx, cfg)?;
                if cand.rejection.is_some() {
                    continue;
                }
                let (out, _) = execute_grasp(scene, &cand.action, &cfg.gripper, &cfg.sim, seed)?;
                if out.reward == 1 {
                    return Ok(Some(PlannedGrasp { candidate: cand, rejections: 0 }));
                }
            }
        }
    }
    Ok(None)
}

/// Scene for one trial, sampled in a bin shrunk by the wall clearance and
/// then put back into the real bin.
fn sample_eval_scene(world: &WorldConfig, scenario: &Scenario, seed: u64) -> Result<Scene> {
    let bin = world.scene.bin;
    let c = scenario.wall_clearance;
    let mut cfg = world.scene.clone();
    cfg.bin.length -= 2.0 * c;
    cfg.bin.width -= 2.0 * c;
    if !(cfg.bin.length > 0.0 && cfg.bin.width > 0.0) {
        return arg(format!("wall clearance {c} leaves no room in the bin"));
    }
    let mut scene = sample_scene_with(&cfg, scenario.m_objects, &scenario.kinds, seed)?;
    scene.bin = bin;
    Ok(scene)
}

/// Run `trials` independent bins of the scenario. Each trial grasps until
/// `n_grasp` successes, the attempt budget, or an empty bin.
pub fn evaluate_grasp_rate(
    model: Option<&RewardModel>,
    scenario: &Scenario,
    world: &WorldConfig,
    n_rot: usize,
    top_k: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    scenario.validate()?;
    if scenario.policy == EvalPolicy::Model && model.is_none() {
        return arg("model policy needs a model");
    }
    let grip = scenario.gripper.geometry(&world.planner.gripper);
    let (rf, n_prim) = model.map_or((31, grip.n_primitives()), |m| (m.spec.receptive_field(), m.spec.n_prim));
    let mut report = EvalReport {
        scenario: scenario.name.clone(),
        trials,
        attempts: 0,
        successes: 0,
        rate: 0.0,
        ci_low: 0.0,
        ci_high: 1.0,
        collisions: 0,
        unplanned: 0,
    };
    for trial in 0..trials {
        let tseed = rng::derive(seed, &[label::EVAL, trial as u64]);
        let mut scene = sample_eval_scene(world, scenario, tseed)?;
        let planner = PlannerConfig {
            gripper: grip.clone(),
            adaption: scenario.adaption,
            bounds: Some(scene.bin.inner_bounds()),
            ..world.planner.clone()
        };
        let mut got = 0;
        let mut excluded = HashSet::new();
        for attempt in 0..scenario.attempt_budget {
            if got == scenario.n_grasp || scene.is_empty() {
                break;
            }
            let aseed = rng::derive(tseed, &[label::ATTEMPT, attempt as u64]);
            let hm = render_heightmap(&scene, &world.grid)?;
            let plan = match scenario.policy {
                EvalPolicy::Oracle => {
                    let geometry = MapGeometry::new(&hm, n_rot, rf, n_prim)?;
                    oracle_plan(&hm, &scene, &geometry, &planner, rng::derive(aseed, &[label::GRASP]))?
                }
                EvalPolicy::Random | EvalPolicy::Model => {
                    let (map, strategy) = if scenario.policy == EvalPolicy::Random {
                        let geometry = MapGeometry::new(&hm, n_rot, rf, n_prim)?;
                        let len = geometry.len();
                        (RewardMap { geometry, values: vec![0.5; len] }, Strategy::Random)
                    } else {
                        let s = if excluded.is_empty() { Strategy::Greedy } else { Strategy::GreedyTopK { k: top_k } };
                        (infer_grid(model.expect("checked above"), &hm, n_rot)?, s)
                    };
                    let eligible = occupied_cells(&hm, &map, planner.bounds, world.min_object_height);
                    let mut rng = rng::stream(aseed, &[label::SELECT]);
                    let mut tried = excluded.clone();
                    match plan_grasp(&hm, &map, &strategy, &planner, &mut rng, &mut tried, Some(&eligible)) {
                        Ok(p) => Some(p),
                        Err(crate::Error::Selection(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
            };
            report.attempts += 1;
            let Some(plan) = plan.filter(|p| p.accepted()) else {
                report.unplanned += 1;
                continue;
            };
            let gseed = rng::derive(aseed, &[label::GRASP]);
            let (out, after) = execute_grasp(&scene, &plan.candidate.action, &planner.gripper, &planner.sim, gseed)?;
            if out.events.contains(&GraspEvent::CollisionAbort) {
                report.collisions += 1;
            }
            if out.reward == 1 {
                got += 1;
                report.successes += 1;
                excluded.clear();
            } else {
                excluded.insert(plan.candidate.index);
            }
            scene = after;
        }
    }
    report.rate = if report.attempts == 0 { 0.0 } else { report.successes as f64 / report.attempts as f64 };
    (report.ci_low, report.ci_high) = wilson_interval(report.successes, report.attempts);
    Ok(report)
}
