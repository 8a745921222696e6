//! Dense reward grids over (rotation, row, column, primitive), selection
//! strategies, the grasp planner with rejection sampling, the two-bin
//! self-supervised training loop and grasp-rate evaluation.

mod eval;
mod planner;
mod training;

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::heightmap::Heightmap;
use crate::imaging::{rotation_stack, stack_angle};
use crate::reward_model::{forward_dense, RewardModel};

pub use eval::{evaluate_grasp_rate, wilson_interval, EvalPolicy, EvalReport, GripperVariant, Scenario};
pub use planner::{evaluate_cell, occupied_cells, plan_grasp, reachable_cells, Candidate, PlannedGrasp, PlannerConfig, Rejection};
pub use training::{
    artifact_paths, read_dataset, resume_training, run_training, AttemptRecord, Checkpoint, LoopConfig, MetricsRow, TrainingRun, TrainingSetup,
    WindowData, WorldConfig,
};

/// Pose lattice of a reward grid: the window scored at `(k, i, j)` is the
/// receptive-field crop with top-left pixel `(i, j)` of the image rotated by
/// `a_k`, and its grasp point is the crop center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGeometry {
    pub n_rot: usize,
    pub rows: usize,
    pub cols: usize,
    pub n_prim: usize,
    pub receptive_field: usize,
    pub origin: [f64; 2],
    pub resolution: f64,
    pub center: [f64; 2],
}

/// Grid indices of one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub m: usize,
}

impl MapGeometry {
    pub fn new(hm: &Heightmap, n_rot: usize, receptive_field: usize, n_prim: usize) -> Result<Self> {
        if n_rot == 0 || n_prim == 0 {
            return arg("reward grid needs at least one rotation and one primitive");
        }
        if hm.width() < receptive_field || hm.height() < receptive_field {
            return arg(format!("heightmap {}x{} smaller than receptive field {receptive_field}", hm.width(), hm.height()));
        }
        let [x0, y0, x1, y1] = hm.extent();
        Ok(Self {
            n_rot,
            rows: hm.height() - receptive_field + 1,
            cols: hm.width() - receptive_field + 1,
            n_prim,
            receptive_field,
            origin: hm.origin(),
            resolution: hm.resolution(),
            center: [(x0 + x1) / 2.0, (y0 + y1) / 2.0],
        })
    }

    pub fn len(&self) -> usize {
        self.n_rot * self.rows * self.cols * self.n_prim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear(&self, c: CellIndex) -> usize {
        ((c.k * self.rows + c.i) * self.cols + c.j) * self.n_prim + c.m
    }

    pub fn cell(&self, idx: usize) -> CellIndex {
        let m = idx % self.n_prim;
        let rest = idx / self.n_prim;
        let j = rest % self.cols;
        let rest = rest / self.cols;
        CellIndex { k: rest / self.rows, i: rest % self.rows, j, m }
    }

    pub fn angle(&self, k: usize) -> f64 {
        stack_angle(k, self.n_rot)
    }

    /// World grasp point and yaw of a cell.
    pub fn pose(&self, c: CellIndex) -> (f64, f64, f64) {
        let d = self.receptive_field as f64 * self.resolution / 2.0;
        let px = self.origin[0] + c.j as f64 * self.resolution + d;
        let py = self.origin[1] + c.i as f64 * self.resolution + d;
        let a = self.angle(c.k);
        let (s, co) = a.sin_cos();
        let (dx, dy) = (px - self.center[0], py - self.center[1]);
        (self.center[0] + co * dx - s * dy, self.center[1] + s * dx + co * dy, a)
    }

    /// Nearest cell to a pose, if it lies on the lattice.
    pub fn locate(&self, x: f64, y: f64, a: f64, m: usize) -> Option<CellIndex> {
        if m >= self.n_prim {
            return None;
        }
        let step = std::f64::consts::PI / self.n_rot as f64;
        let k = ((a + std::f64::consts::FRAC_PI_2) / step).round().rem_euclid(self.n_rot as f64) as usize;
        let ang = self.angle(k);
        let (s, co) = ang.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (px, py) = (self.center[0] + co * dx + s * dy, self.center[1] - s * dx + co * dy);
        let d = self.receptive_field as f64 * self.resolution / 2.0;
        let j = ((px - self.origin[0] - d) / self.resolution).round();
        let i = ((py - self.origin[1] - d) / self.resolution).round();
        if i < 0.0 || j < 0.0 || i >= self.rows as f64 || j >= self.cols as f64 {
            return None;
        }
        Some(CellIndex { k, i: i as usize, j: j as usize, m })
    }
}

/// Estimated success probability for every action on the grid, stored at
/// `geometry.linear(cell)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMap {
    pub geometry: MapGeometry,
    pub values: Vec<f32>,
}

impl RewardMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, c: CellIndex) -> f32 {
        self.values[self.geometry.linear(c)]
    }

    /// Maximum over rotations and primitives of the cells whose grasp point
    /// falls in each pixel of the source heightmap, row-major; `None` where
    /// no grasp point lands.
    pub fn max_projection(&self) -> (usize, usize, Vec<Option<f32>>) {
        let g = &self.geometry;
        let (w, h) = (g.cols + g.receptive_field - 1, g.rows + g.receptive_field - 1);
        let mut out = vec![None; w * h];
        for (idx, &v) in self.values.iter().enumerate() {
            let (x, y, _) = g.pose(g.cell(idx));
            let col = ((x - g.origin[0]) / g.resolution).floor();
            let row = ((y - g.origin[1]) / g.resolution).floor();
            if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
                continue;
            }
            let o: &mut Option<f32> = &mut out[row as usize * w + col as usize];
            *o = Some(o.map_or(v, |p| p.max(v)));
        }
        (w, h, out)
    }
}

/// Wall-clock split of one grid evaluation, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GridTiming {
    /// Rotating the image stack and assembling the grid.
    pub processing_ms: f64,
    /// Network forward passes.
    pub inference_ms: f64,
}

/// Score every (rotation, position, primitive) with one dense pass per
/// rotation; rotations run in parallel and are merged in order.
pub fn infer_grid(model: &RewardModel, hm: &Heightmap, n_rot: usize) -> Result<RewardMap> {
    infer_grid_timed(model, hm, n_rot).map(|(map, _)| map)
}

pub fn infer_grid_timed(model: &RewardModel, hm: &Heightmap, n_rot: usize) -> Result<(RewardMap, GridTiming)> {
    let t0 = Instant::now();
    let geometry = MapGeometry::new(hm, n_rot, model.spec.receptive_field(), model.spec.n_prim)?;
    let stack = rotation_stack(hm, n_rot)?;
    let t1 = Instant::now();
    let dense: Vec<_> = stack.par_iter().map(|img| forward_dense(model, &img.image)).collect::<Result<_>>()?;
    let t2 = Instant::now();
    let g = &geometry;
    let mut values = vec![0.0f32; g.len()];
    for (k, d) in dense.iter().enumerate() {
        for i in 0..g.rows {
            for j in 0..g.cols {
                for m in 0..g.n_prim {
                    values[g.linear(CellIndex { k, i, j, m })] = d.prob(m, i, j);
                }
            }
        }
    }
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let timing = GridTiming { processing_ms: ms(t1 - t0) + ms(t2.elapsed()), inference_ms: ms(t2 - t1) };
    Ok((RewardMap { geometry, values }, timing))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Random,
    Boltzmann { temperature: f64 },
    EpsilonGreedy { epsilon: f64 },
    Greedy,
    GreedyTopK { k: usize },
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Strategy::Boltzmann { temperature } => temperature > 0.0 && temperature.is_finite(),
            Strategy::EpsilonGreedy { epsilon } => (0.0..=1.0).contains(&epsilon),
            Strategy::GreedyTopK { k } => k > 0,
            Strategy::Random | Strategy::Greedy => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid strategy {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Boltzmann { .. } => "boltzmann",
            Strategy::EpsilonGreedy { .. } => "epsilon_greedy",
            Strategy::Greedy => "greedy",
            Strategy::GreedyTopK { .. } => "greedy_top_k",
        }
    }
}

/// Exploration schedule of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub n_random: usize,
    pub n_boltzmann: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub epsilon: f64,
    /// Candidates kept by top-k retries after a failure.
    pub top_k: usize,
    pub n_rot: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { n_random: 400, n_boltzmann: 1200, t_start: 1.0, t_end: 0.05, epsilon: 0.1, top_k: 5, n_rot: 20 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_start > 0.0
            && self.t_end > 0.0
            && self.t_start.is_finite()
            && self.t_end.is_finite()
            && (0.0..=1.0).contains(&self.epsilon)
            && self.top_k > 0
            && self.n_rot > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid policy config {self:?}")))
        }
    }

    /// Strategy for the `attempt`-th grasp: random, then Boltzmann with an
    /// exponentially decaying temperature, then epsilon-greedy.
    pub fn strategy_at(&self, attempt: usize) -> Strategy {
        if attempt < self.n_random {
            Strategy::Random
        } else if attempt < self.n_random + self.n_boltzmann {
            let f = (attempt - self.n_random) as f64 / self.n_boltzmann.max(1) as f64;
            Strategy::Boltzmann { temperature: self.t_start * (self.t_end / self.t_start).powf(f) }
        } else {
            Strategy::EpsilonGreedy { epsilon: self.epsilon }
        }
    }
}

/// Pick a cell index. `eligible` restricts uniform draws (random strategy and
/// the exploratory branch of epsilon-greedy); it does not restrict the
/// value-driven choices.
pub fn select(
    map: &RewardMap,
    strategy: &Strategy,
    rng: &mut impl Rng,
    excluded: &HashSet<usize>,
    eligible: Option<&[usize]>,
) -> Result<usize> {
    Sampler::new(map, strategy, eligible, None)?.draw(rng, excluded)
}

/// Redraws before falling back to an exact pass over the non-excluded cells.
const REDRAWS: usize = 64;

/// A selection strategy prepared for one map, so repeated draws with a
/// growing exclusion set (the planner's rejection loop) skip the full pass.
/// Draws with exclusions are rejection samples from the unrestricted
/// distribution, which is exactly the distribution restricted to the
/// remaining cells. Cells outside `allowed` are never drawn by any strategy.
pub struct Sampler<'a> {
    map: &'a RewardMap,
    strategy: Strategy,
    allowed: Option<&'a [bool]>,
    /// Candidates for uniform draws; `None` means every cell.
    pool: Option<Vec<usize>>,
    /// Boltzmann cumulative weights, relative to the best allowed value.
    cumulative: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        map: &'a RewardMap,
        strategy: &Strategy,
        eligible: Option<&[usize]>,
        allowed: Option<&'a [bool]>,
    ) -> Result<Self> {
        strategy.validate()?;
        if map.is_empty() {
            return arg("reward map is empty");
        }
        if allowed.is_some_and(|a| a.len() != map.len()) {
            return arg("reachability mask does not match the map");
        }
        let ok = |i: usize| allowed.is_none_or(|a| a[i]);
        let pool = match (eligible, allowed) {
            (Some(e), _) => Some(e.iter().copied().filter(|&i| i < map.len() && ok(i)).collect()),
            (None, Some(a)) => Some((0..map.len()).filter(|&i| a[i]).collect()),
            (None, None) => None,
        };
        let mut cumulative = Vec::new();
        if let Strategy::Boltzmann { temperature } = *strategy {
            let best = map
                .values
                .iter()
                .enumerate()
                .filter(|&(i, _)| ok(i))
                .fold(f32::NEG_INFINITY, |b, (_, &v)| b.max(v)) as f64;
            let mut acc = 0.0;
            cumulative = map
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if ok(i) {
                        acc += ((v as f64 - best) / temperature).exp();
                    }
                    acc
                })
                .collect();
        }
        Ok(Self { map, strategy: *strategy, allowed, pool, cumulative })
    }

    fn allowed(&self, i: usize) -> bool {
        self.allowed.is_none_or(|a| a[i])
    }

    pub fn draw(&self, rng: &mut impl Rng, excluded: &HashSet<usize>) -> Result<usize> {
        match self.strategy {
            Strategy::Random => self.uniform(rng, excluded),
            Strategy::Greedy => greedy(self.map, excluded, self.allowed),
            Strategy::EpsilonGreedy { epsilon } => {
                if rng.gen::<f64>() < epsilon {
                    self.uniform(rng, excluded)
                } else {
                    greedy(self.map, excluded, self.allowed)
                }
            }
            Strategy::Boltzmann { .. } => self.boltzmann(rng, excluded),
            Strategy::GreedyTopK { k } => {
                let top = best_k(self.map, excluded, self.allowed, k);
                if top.is_empty() {
                    return Err(Error::Selection("every cell is excluded".into()));
                }
                Ok(top[rng.gen_range(0..top.len())])
            }
        }
    }

    fn uniform(&self, rng: &mut impl Rng, excluded: &HashSet<usize>) -> Result<usize> {
        let len = self.pool.as_ref().map_or(self.map.len(), Vec::len);
        let pick = |r: usize| self.pool.as_ref().map_or(r, |p| p[r]);
        if len == 0 {
            return Err(Error::Selection("no eligible cell left".into()));
        }
        for _ in 0..REDRAWS {
            let i = pick(rng.gen_range(0..len));
            if !excluded.contains(&i) {
                return Ok(i);
            }
        }
        let rest: Vec<usize> = (0..len).map(pick).filter(|i| !excluded.contains(i)).collect();
        if rest.is_empty() {
            return Err(Error::Selection("no eligible cell left".into()));
        }
        Ok(rest[rng.gen_range(0..rest.len())])
    }

    fn boltzmann(&self, rng: &mut impl Rng, excluded: &HashSet<usize>) -> Result<usize> {
        let total = *self.cumulative.last().expect("map is not empty");
        if !(total > 0.0) {
            return Err(Error::Selection("no reachable cell".into()));
        }
        for _ in 0..REDRAWS {
            let u = rng.gen::<f64>() * total;
            let i = self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1);
            if !excluded.contains(&i) && self.allowed(i) {
                return Ok(i);
            }
        }
        // the excluded cells hold most of the mass: renormalize over the rest
        let Strategy::Boltzmann { temperature } = self.strategy else { unreachable!() };
        let best = self.map.values[greedy(self.map, excluded, self.allowed)?] as f64;
        let weights: Vec<f64> = (0..self.map.len())
            .map(|i| {
                if excluded.contains(&i) || !self.allowed(i) {
                    0.0
                } else {
                    ((self.map.values[i] as f64 - best) / temperature).exp()
                }
            })
            .collect();
        let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                if u < *w {
                    return Ok(i);
                }
                u -= w;
            }
        }
        // rounding left a sliver past the last weight
        greedy(self.map, excluded, self.allowed)
    }
}

/// Highest value, lowest index on ties.
fn greedy(map: &RewardMap, excluded: &HashSet<usize>, allowed: Option<&[bool]>) -> Result<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in map.values.iter().enumerate() {
        if best.is_some_and(|(_, b)| v <= b) || allowed.is_some_and(|a| !a[i]) || excluded.contains(&i) {
            continue;
        }
        best = Some((i, v));
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::Selection("every cell is excluded".into()))
}

/// The `k` best non-excluded cells, best first, ties by index.
pub fn top_k(map: &RewardMap, excluded: &HashSet<usize>, k: usize) -> Vec<usize> {
    best_k(map, excluded, None, k)
}

fn best_k(map: &RewardMap, excluded: &HashSet<usize>, allowed: Option<&[bool]>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> =
        (0..map.len()).filter(|&i| allowed.is_none_or(|a| a[i]) && (excluded.is_empty() || !excluded.contains(&i))).collect();
    let cmp = |a: &usize, b: &usize| map.values[*b].total_cmp(&map.values[*a]).then(a.cmp(b));
    if idx.len() > k {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[cfg(test)]
mod tests;
