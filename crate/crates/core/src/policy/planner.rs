//! Turning a selected grid cell into a full 6-DoF grasp: window, approach
//! height, lateral angles and the collision check, with bounded rejection
//! sampling over further cells.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CellIndex, RewardMap, Sampler, Strategy};
use crate::collision::{check_grasp_collision, GripperGeometry};
use crate::error::{Error, Result};
use crate::grasp_sim::{compute_z, GraspAction, SimConfig};
use crate::heightmap::Heightmap;
use crate::imaging::{extract_window, DEFAULT_WINDOW};
use crate::lateral_controller::{lateral_control, ControllerConfig, LateralAngles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub gripper: GripperGeometry,
    pub controller: ControllerConfig,
    pub sim: SimConfig,
    /// Compute `b`, `c` with the controller; otherwise grasps stay planar.
    pub adaption: bool,
    pub rejection_budget: usize,
    /// Reachable grasp points `[x0, y0, x1, y1]`.
    pub bounds: Option<[f64; 4]>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            gripper: GripperGeometry::default(),
            controller: ControllerConfig::default(),
            sim: SimConfig::default(),
            adaption: true,
            rejection_budget: 25,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Range,
    Unknown,
    EmptyInterval,
    Collision,
}

/// A fully specified grasp for one cell. `rejection` is set when the
/// candidate failed a check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub cell: CellIndex,
    pub value: f32,
    pub action: GraspAction,
    pub lateral: Option<LateralAngles>,
    /// The controller could not run and the angles fell back to zero.
    pub uncertain: bool,
    pub rejection: Option<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedGrasp {
    /// Accepted candidate, or the last rejected one when the budget ran out.
    pub candidate: Candidate,
    pub rejections: usize,
}

impl PlannedGrasp {
    pub fn accepted(&self) -> bool {
        self.candidate.rejection.is_none()
    }
}

/// Build and check the grasp at one cell.
pub fn evaluate_cell(hm: &Heightmap, map: &RewardMap, index: usize, cfg: &PlannerConfig) -> Result<Candidate> {
    let cell = map.geometry.cell(index);
    let (x, y, a) = map.geometry.pose(cell);
    let m = cell.m;
    let mut cand = Candidate {
        index,
        cell,
        value: map.values[index],
        action: GraspAction { m, x, y, z: 0.0, a, b: 0.0, c: 0.0 },
        lateral: None,
        uncertain: false,
        rejection: None,
    };
    let reject = |mut c: Candidate, r| {
        c.rejection = Some(r);
        Ok(c)
    };
    if let Some([x0, y0, x1, y1]) = cfg.bounds {
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return reject(cand, Rejection::Range);
        }
    }
    let w = match extract_window(hm, x, y, a, DEFAULT_WINDOW) {
        Ok(w) => w,
        Err(Error::Range { .. }) => return reject(cand, Rejection::Range),
        Err(e) => return Err(e),
    };
    cand.action.z = match compute_z(&w, &cfg.gripper, m, &cfg.sim) {
        Ok(z) => z,
        Err(Error::Rejected(_)) => return reject(cand, Rejection::Unknown),
        Err(e) => return Err(e),
    };
    if cfg.adaption {
        match lateral_control(&w, m, &cfg.gripper, &cfg.controller, cand.action.z) {
            Ok(l) => {
                cand.action.b = l.b;
                cand.action.c = l.c;
                cand.lateral = Some(l);
            }
            Err(Error::EmptyInterval { .. }) => return reject(cand, Rejection::EmptyInterval),
            Err(Error::Controller(_) | Error::Collision(_)) => cand.uncertain = true,
            Err(e) => return Err(e),
        }
    }
    if check_grasp_collision(hm, &cand.action, &cfg.gripper) {
        return reject(cand, Rejection::Collision);
    }
    Ok(cand)
}

/// Cells whose grasp point lies on the heightmap and inside `bounds`.
pub fn reachable_cells(hm: &Heightmap, map: &RewardMap, bounds: Option<[f64; 4]>) -> Vec<bool> {
    let g = &map.geometry;
    let mut out = Vec::with_capacity(g.len());
    for k in 0..g.n_rot {
        for i in 0..g.rows {
            for j in 0..g.cols {
                let (x, y, _) = g.pose(CellIndex { k, i, j, m: 0 });
                let inside = hm.contains(x, y) && bounds.is_none_or(|[x0, y0, x1, y1]| x >= x0 && x <= x1 && y >= y0 && y <= y1);
                out.extend(std::iter::repeat_n(inside, g.n_prim));
            }
        }
    }
    out
}

/// Select reachable cells until one passes every check or the rejection
/// budget is spent. Rejected cells are added to `excluded`.
pub fn plan_grasp(
    hm: &Heightmap,
    map: &RewardMap,
    strategy: &Strategy,
    cfg: &PlannerConfig,
    rng: &mut impl Rng,
    excluded: &mut HashSet<usize>,
    eligible: Option<&[usize]>,
) -> Result<PlannedGrasp> {
    let budget = cfg.rejection_budget.max(1);
    let reach = reachable_cells(hm, map, cfg.bounds);
    let sampler = Sampler::new(map, strategy, eligible, Some(&reach))?;
    let mut last = None;
    for tried in 0..budget {
        let idx = match sampler.draw(rng, excluded) {
            Ok(i) => i,
            Err(Error::Selection(msg)) => match last {
                Some(candidate) => return Ok(PlannedGrasp { candidate, rejections: tried }),
                None => return Err(Error::Selection(msg)),
            },
            Err(e) => return Err(e),
        };
        let cand = evaluate_cell(hm, map, idx, cfg)?;
        if cand.rejection.is_none() {
            return Ok(PlannedGrasp { candidate: cand, rejections: tried });
        }
        excluded.insert(idx);
        last = Some(cand);
    }
    Ok(PlannedGrasp { candidate: last.expect("budget is at least one"), rejections: budget })
}

/// Cells whose grasp point lies inside `bounds` over a surface at least
/// `min_height` above the floor, for every primitive.
pub fn occupied_cells(hm: &Heightmap, map: &RewardMap, bounds: Option<[f64; 4]>, min_height: f64) -> Vec<usize> {
    let g = &map.geometry;
    let mut out = Vec::new();
    for k in 0..g.n_rot {
        for i in 0..g.rows {
            for j in 0..g.cols {
                let (x, y, _) = g.pose(CellIndex { k, i, j, m: 0 });
                if let Some([x0, y0, x1, y1]) = bounds {
                    if x < x0 || x > x1 || y < y0 || y > y1 {
                        continue;
                    }
                }
                if hm.height_at(x, y).is_some_and(|h| h as f64 >= min_height) {
                    let base = g.linear(CellIndex { k, i, j, m: 0 });
                    out.extend(base..base + g.n_prim);
                }
            }
        }
    }
    out
}
