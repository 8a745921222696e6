//! Two-bin self-supervised data collection: grasp from the source bin, drop
//! successes at random into the other bin, retrain periodically, advance the
//! curriculum and swap bins when the source runs empty.

use std::collections::{HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::planner::{occupied_cells, plan_grasp, PlannedGrasp, PlannerConfig, Rejection};
use super::{infer_grid, MapGeometry, PolicyConfig, RewardMap, Strategy};
use crate::error::{Error, Result};
use crate::grasp_sim::{execute_grasp, AttemptOutcome, GraspEvent};
use crate::heightmap::Heightmap;
use crate::imaging::{extract_window, Window};
use crate::reward_model::{init_model, train, ModelSpec, RewardModel, TrainConfig, TrainReport, TrainSample};
use crate::rng::{self, label};
use crate::scene::{place_random, render_heightmap, sample_scene, GridSpec, Scene, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub scene: SceneConfig,
    pub grid: GridSpec,
    pub planner: PlannerConfig,
    /// Random exploration only aims at surfaces at least this high, meters.
    pub min_object_height: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), grid: GridSpec::default(), planner: PlannerConfig::default(), min_object_height: 0.005 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.planner.gripper.validate()?;
        self.planner.controller.validate()?;
        self.planner.sim.validate()?;
        if self.grid.width == 0 || self.grid.height == 0 || !(self.grid.resolution > 0.0) {
            return Err(Error::Config(format!("invalid grid {:?}", self.grid)));
        }
        Ok(())
    }

    /// Planner settings with reach limited to the bin interior.
    pub fn planner_for(&self, scene: &Scene) -> PlannerConfig {
        PlannerConfig { bounds: Some(scene.bin.inner_bounds()), ..self.planner.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub attempts: usize,
    pub retrain_interval: usize,
    /// Rolling success rate needed to leave each stage but the last.
    pub stage_thresholds: Vec<f64>,
    pub rolling_window: usize,
    /// Consecutive failures after which the world is re-sampled.
    pub stuck_limit: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { attempts: 2700, retrain_interval: 200, stage_thresholds: vec![0.6, 0.5, 0.4], rolling_window: 100, stuck_limit: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSetup {
    pub world: WorldConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub schedule: LoopConfig,
    /// Stamped into every record and metrics row.
    pub config_hash: String,
}

impl Default for TrainingSetup {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            policy: PolicyConfig::default(),
            schedule: LoopConfig::default(),
            config_hash: String::new(),
        }
    }
}

impl TrainingSetup {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        let s = &self.schedule;
        if s.retrain_interval == 0 || s.rolling_window == 0 || s.stuck_limit == 0 {
            return Err(Error::Config("retrain interval, rolling window and stuck limit must be positive".into()));
        }
        if s.stage_thresholds.len() + 1 < self.world.scene.stages.len()
            || s.stage_thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::Config("need one threshold in [0, 1] per curriculum stage transition".into()));
        }
        if self.model.n_prim != self.world.planner.gripper.n_primitives() {
            return Err(Error::Config(format!(
                "model scores {} primitives, gripper has {}",
                self.model.n_prim,
                self.world.planner.gripper.n_primitives()
            )));
        }
        Ok(())
    }
}

/// Network input stored with a record: unknown cells hold -1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowData {
    pub size: usize,
    pub resolution: f64,
    pub values: Vec<f32>,
}

impl WindowData {
    pub fn from_window(w: &Window) -> Self {
        let n = w.size();
        let values = (0..n * n).map(|i| w.image.get(i / n, i % n).unwrap_or(-1.0)).collect();
        Self { size: n, resolution: w.resolution(), values }
    }

    pub fn to_heightmap(&self) -> Result<Heightmap> {
        let d = self.size as f64 * self.resolution / 2.0;
        let mask: Vec<bool> = self.values.iter().map(|v| *v < 0.0).collect();
        Heightmap::from_parts(self.size, self.size, self.resolution, [-d, -d], self.values.clone(), mask)
    }
}

/// One grasp attempt, the row of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub seed: u64,
    pub config_hash: String,
    pub bin: usize,
    pub stage: usize,
    pub strategy: String,
    /// False when every candidate was rejected and nothing ran.
    pub executed: bool,
    pub m: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub predicted: f32,
    pub reward: u8,
    pub d_final: f64,
    pub quality: f64,
    pub events: Vec<GraspEvent>,
    pub object_id: Option<u64>,
    pub rejections: usize,
    pub clipped_b: bool,
    pub clipped_c: bool,
    pub uncertain: bool,
    pub window: WindowData,
}

impl AttemptRecord {
    /// Executed attempts, and attempts that failed because every candidate
    /// collided (a reward-0 sample at the last candidate). Range failures
    /// stay out: their window can lie off the map.
    pub fn trains(&self) -> bool {
        self.executed || self.events == [GraspEvent::CollisionAbort]
    }

    pub fn to_sample(&self, max_stroke: f64) -> Result<TrainSample> {
        Ok(TrainSample {
            window: self.window.to_heightmap()?,
            m: self.m,
            reward: self.reward,
            aux: [self.b, self.c, self.d_final / max_stroke],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub attempt: usize,
    pub stage: usize,
    pub samples: usize,
    #[serde(with = "crate::serde_nan")]
    pub initial_val_bce: f64,
    #[serde(with = "crate::serde_nan")]
    pub val_bce: f64,
    /// Over the attempts since the previous row.
    #[serde(with = "crate::serde_nan")]
    pub success_rate: f64,
    #[serde(with = "crate::serde_nan")]
    pub mean_abs_b: f64,
    #[serde(with = "crate::serde_nan")]
    pub mean_abs_c: f64,
    #[serde(with = "crate::serde_nan::pair")]
    pub bin_success: [f64; 2],
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "attempt,stage,samples,initial_val_bce,val_bce,success_rate,mean_abs_b,mean_abs_c,bin0_success,bin1_success,config_hash,seed";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.attempt,
            self.stage,
            self.samples,
            self.initial_val_bce,
            self.val_bce,
            self.success_rate,
            self.mean_abs_b,
            self.mean_abs_c,
            self.bin_success[0],
            self.bin_success[1],
            self.config_hash,
            self.seed
        )
    }
}

/// Loop state saved at every retrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub next_attempt: usize,
    pub bins: [Scene; 2],
    pub source: usize,
    pub stage: usize,
    pub stage_attempts: usize,
    pub rolling: VecDeque<u8>,
    pub consecutive_failures: usize,
    /// Number of worlds sampled so far; seeds the next one.
    pub worlds: u64,
    pub dataset_len: usize,
    pub metrics: Vec<MetricsRow>,
    pub reports: Vec<TrainReport>,
    pub events: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: RewardModel,
    pub dataset: Vec<AttemptRecord>,
    pub metrics: Vec<MetricsRow>,
    pub reports: Vec<TrainReport>,
    pub state: Checkpoint,
}

impl TrainingRun {
    /// Counts of logged `b` and `c` in equal bins over `[-limit, limit]`.
    pub fn lateral_histogram(&self, n_bins: usize, limit: f64) -> (Vec<usize>, Vec<usize>) {
        let mut hb = vec![0; n_bins];
        let mut hc = vec![0; n_bins];
        let bin = |v: f64| (((v + limit) / (2.0 * limit)) * n_bins as f64).floor().clamp(0.0, n_bins as f64 - 1.0) as usize;
        for r in self.dataset.iter().filter(|r| r.executed) {
            hb[bin(r.b)] += 1;
            hc[bin(r.c)] += 1;
        }
        (hb, hc)
    }
}

const MODEL_FILE: &str = "model.ggrid";
const DATASET_FILE: &str = "dataset.jsonl";
const METRICS_FILE: &str = "metrics.csv";
const CHECKPOINT_FILE: &str = "checkpoint.json";

fn new_world(setup: &TrainingSetup, seed: u64, stage: usize, worlds: &mut u64) -> Result<[Scene; 2]> {
    let s = sample_scene(&setup.world.scene, stage, rng::derive(seed, &[label::SCENE, *worlds]))?;
    *worlds += 1;
    let empty = Scene::empty(s.bin, s.rng_seed);
    Ok([s, empty])
}

fn fresh_state(setup: &TrainingSetup, seed: u64) -> Result<Checkpoint> {
    let mut worlds = 0;
    let bins = new_world(setup, seed, 0, &mut worlds)?;
    Ok(Checkpoint {
        seed,
        config_hash: setup.config_hash.clone(),
        next_attempt: 0,
        bins,
        source: 0,
        stage: 0,
        stage_attempts: 0,
        rolling: VecDeque::new(),
        consecutive_failures: 0,
        worlds,
        dataset_len: 0,
        metrics: Vec::new(),
        reports: Vec::new(),
        events: Vec::new(),
    })
}

/// Run the loop from scratch. With `out_dir`, the dataset is appended as it
/// grows and a checkpoint is written at every retrain. `stop_after` ends the
/// run early after that many attempts, as if the process were killed.
pub fn run_training(setup: &TrainingSetup, seed: u64, out_dir: Option<&Path>, stop_after: Option<usize>) -> Result<TrainingRun> {
    setup.validate()?;
    let state = fresh_state(setup, seed)?;
    let model = init_model(&setup.model, rng::derive(seed, &[label::INIT]))?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        File::create(dir.join(DATASET_FILE))?;
    }
    drive(setup, state, model, Vec::new(), out_dir, stop_after)
}

/// Continue from the checkpoint in `out_dir`, or start fresh when there is none.
/// Records written after the checkpoint are discarded and replayed.
pub fn resume_training(setup: &TrainingSetup, seed: u64, out_dir: &Path, stop_after: Option<usize>) -> Result<TrainingRun> {
    setup.validate()?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    if !ck_path.exists() {
        return run_training(setup, seed, Some(out_dir), stop_after);
    }
    let state: Checkpoint = serde_json::from_str(&fs::read_to_string(&ck_path)?)
        .map_err(|e| Error::Integrity(format!("checkpoint {}: {e}", ck_path.display())))?;
    if state.seed != seed || state.config_hash != setup.config_hash {
        return Err(Error::Config(format!(
            "checkpoint belongs to seed {} / config {}, not seed {seed} / config {}",
            state.seed, state.config_hash, setup.config_hash
        )));
    }
    let model = RewardModel::load(&out_dir.join(MODEL_FILE)).map_err(|e| match e {
        Error::Io(e) => Error::Integrity(format!("checkpoint model: {e}")),
        other => other,
    })?;
    let dataset = read_dataset(&out_dir.join(DATASET_FILE), state.dataset_len)?;
    write_dataset(&out_dir.join(DATASET_FILE), &dataset)?;
    drive(setup, state, model, dataset, Some(out_dir), stop_after)
}

/// First `keep` records of a dataset file.
pub fn read_dataset(path: &Path, keep: usize) -> Result<Vec<AttemptRecord>> {
    let file = File::open(path).map_err(|e| Error::Integrity(format!("dataset {}: {e}", path.display())))?;
    let mut out = Vec::with_capacity(keep);
    for (i, line) in BufReader::new(file).lines().enumerate().take(keep) {
        let line = line?;
        let rec: AttemptRecord =
            serde_json::from_str(&line).map_err(|e| Error::Integrity(format!("dataset line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    if out.len() < keep {
        return Err(Error::Integrity(format!("dataset has {} records, checkpoint expects {keep}", out.len())));
    }
    Ok(out)
}

fn write_dataset(path: &Path, records: &[AttemptRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_checkpoint(dir: &Path, state: &Checkpoint, model: &RewardModel) -> Result<()> {
    let tmp = |name: &str| dir.join(format!("{name}.tmp"));
    model.save(&tmp(MODEL_FILE))?;
    fs::rename(tmp(MODEL_FILE), dir.join(MODEL_FILE))?;
    let mut csv = String::from(MetricsRow::CSV_HEADER);
    csv.push('\n');
    for row in &state.metrics {
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), csv)?;
    fs::write(tmp(CHECKPOINT_FILE), serde_json::to_vec(state)?)?;
    fs::rename(tmp(CHECKPOINT_FILE), dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = it.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Grid of poses for the current heightmap, scored by the model unless the
/// strategy ignores values.
fn reward_map(model: &RewardModel, hm: &Heightmap, strategy: &Strategy, n_rot: usize) -> Result<RewardMap> {
    if *strategy == Strategy::Random {
        let geometry = MapGeometry::new(hm, n_rot, model.spec.receptive_field(), model.spec.n_prim)?;
        let len = geometry.len();
        return Ok(RewardMap { geometry, values: vec![0.5; len] });
    }
    infer_grid(model, hm, n_rot)
}

fn record_of(
    setup: &TrainingSetup,
    state: &Checkpoint,
    t: usize,
    hm: &Heightmap,
    strategy: &Strategy,
    plan: &PlannedGrasp,
    outcome: &AttemptOutcome,
    executed: bool,
    rf: usize,
) -> Result<AttemptRecord> {
    let cand = &plan.candidate;
    let act = &cand.action;
    let window = match extract_window(hm, act.x, act.y, act.a, rf) {
        Ok(w) => WindowData::from_window(&w),
        // only rejected candidates can sit off the map
        Err(Error::Range { .. }) if !executed => {
            WindowData { size: rf, resolution: hm.resolution(), values: vec![-1.0; rf * rf] }
        }
        Err(e) => return Err(e),
    };
    Ok(AttemptRecord {
        attempt: t,
        seed: state.seed,
        config_hash: setup.config_hash.clone(),
        bin: state.source,
        stage: state.stage,
        strategy: strategy.name().into(),
        executed,
        m: act.m,
        x: act.x,
        y: act.y,
        z: act.z,
        a: act.a,
        b: act.b,
        c: act.c,
        predicted: cand.value,
        reward: outcome.reward,
        d_final: outcome.d_final,
        quality: outcome.quality,
        events: outcome.events.clone(),
        object_id: outcome.object_id,
        rejections: plan.rejections,
        clipped_b: cand.lateral.is_some_and(|l| l.clipped_b),
        clipped_c: cand.lateral.is_some_and(|l| l.clipped_c),
        uncertain: cand.uncertain,
        window,
    })
}

fn drive(
    setup: &TrainingSetup,
    mut state: Checkpoint,
    mut model: RewardModel,
    mut dataset: Vec<AttemptRecord>,
    out_dir: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainingRun> {
    let seed = state.seed;
    let sched = &setup.schedule;
    let grip = &setup.world.planner.gripper;
    let rf = setup.model.receptive_field();
    let n_stages = setup.world.scene.stages.len();
    let end = stop_after.map_or(sched.attempts, |s| s.min(sched.attempts));
    let mut writer = match out_dir {
        Some(dir) => Some(BufWriter::new(OpenOptions::new().append(true).create(true).open(dir.join(DATASET_FILE))?)),
        None => None,
    };

    while state.next_attempt < end {
        let t = state.next_attempt;
        if state.bins[state.source].is_empty() {
            state.source = 1 - state.source;
            state.events.push(format!("attempt {t}: bins swapped, source is bin {}", state.source));
        }
        let scene = state.bins[state.source].clone();
        let hm = render_heightmap(&scene, &setup.world.grid)?;
        let strategy = setup.policy.strategy_at(t);
        let map = reward_map(&model, &hm, &strategy, setup.policy.n_rot)?;
        let planner = setup.world.planner_for(&scene);
        let eligible = occupied_cells(&hm, &map, planner.bounds, setup.world.min_object_height);
        let mut sel_rng = rng::stream(seed, &[label::SELECT, t as u64]);
        let plan = match plan_grasp(&hm, &map, &strategy, &planner, &mut sel_rng, &mut HashSet::new(), Some(&eligible)) {
            Ok(p) => p,
            Err(Error::Selection(msg)) => {
                state.events.push(format!("attempt {t}: nothing to select ({msg}); world re-sampled"));
                state.bins = new_world(setup, seed, state.stage, &mut state.worlds)?;
                state.source = 0;
                continue;
            }
            Err(e) => return Err(e),
        };

        let executed = plan.accepted();
        let (outcome, after) = if executed {
            let gseed = rng::derive(seed, &[label::GRASP, t as u64]);
            execute_grasp(&scene, &plan.candidate.action, grip, &setup.world.planner.sim, gseed)?
        } else {
            let event = match plan.candidate.rejection {
                Some(Rejection::Range | Rejection::Unknown) => GraspEvent::RangeViolation,
                _ => GraspEvent::CollisionAbort,
            };
            let outcome = AttemptOutcome { reward: 0, d_final: 0.0, events: vec![event], quality: 0.0, object_id: None };
            (outcome, scene.clone())
        };
        let record = record_of(setup, &state, t, &hm, &strategy, &plan, &outcome, executed, rf)?;

        if outcome.reward == 1 {
            let id = outcome.object_id.expect("successful grasp holds an object");
            let obj = scene.object(id).expect("held object came from the source").clone();
            let target = 1 - state.source;
            let pseed = rng::derive(seed, &[label::PLACE, t as u64]);
            match place_random(&state.bins[target], obj.clone(), pseed) {
                Ok(placed) => {
                    state.bins[target] = placed;
                    state.bins[state.source] = after;
                }
                Err(e) => {
                    // keep the object where it was rather than lose it
                    state.events.push(format!("attempt {t}: placement failed ({e}); object returned"));
                }
            }
        } else {
            state.bins[state.source] = after;
        }

        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        dataset.push(record);
        state.dataset_len = dataset.len();
        state.next_attempt += 1;
        state.stage_attempts += 1;
        state.rolling.push_back(outcome.reward);
        while state.rolling.len() > sched.rolling_window {
            state.rolling.pop_front();
        }
        state.consecutive_failures = if outcome.reward == 1 { 0 } else { state.consecutive_failures + 1 };

        let rolling_rate = mean(state.rolling.iter().map(|&r| r as f64));
        if state.stage + 1 < n_stages
            && state.rolling.len() >= sched.rolling_window
            && rolling_rate >= sched.stage_thresholds[state.stage]
        {
            state.stage += 1;
            state.stage_attempts = 0;
            state.rolling.clear();
            state.consecutive_failures = 0;
            state.bins = new_world(setup, seed, state.stage, &mut state.worlds)?;
            state.source = 0;
            state.events.push(format!("attempt {t}: advanced to stage {}", state.stage));
        } else if state.consecutive_failures >= sched.stuck_limit {
            state.consecutive_failures = 0;
            state.bins = new_world(setup, seed, state.stage, &mut state.worlds)?;
            state.source = 0;
            state.events.push(format!("attempt {t}: {} failures in a row; world re-sampled", sched.stuck_limit));
        }

        if state.next_attempt % sched.retrain_interval == 0 {
            let retrain = state.metrics.len() as u64;
            let samples: Vec<TrainSample> =
                dataset.iter().filter(|r| r.trains()).map(|r| r.to_sample(grip.max_stroke)).collect::<Result<_>>()?;
            let cfg = TrainConfig { seed: rng::derive(seed, &[label::SHUFFLE, retrain]), ..setup.train.clone() };
            let report = if samples.is_empty() {
                None
            } else {
                Some(train(&mut model, &samples, &cfg)?)
            };
            let recent = &dataset[dataset.len().saturating_sub(sched.retrain_interval)..];
            let row = MetricsRow {
                attempt: state.next_attempt,
                stage: state.stage,
                samples: samples.len(),
                initial_val_bce: report.as_ref().map_or(f64::NAN, |r| r.initial_val_bce),
                val_bce: report.as_ref().map_or(f64::NAN, |r| r.final_val_bce()),
                success_rate: mean(recent.iter().map(|r| r.reward as f64)),
                mean_abs_b: mean(recent.iter().filter(|r| r.executed).map(|r| r.b.abs())),
                mean_abs_c: mean(recent.iter().filter(|r| r.executed).map(|r| r.c.abs())),
                bin_success: [0, 1].map(|b| mean(recent.iter().filter(|r| r.bin == b).map(|r| r.reward as f64))),
                config_hash: setup.config_hash.clone(),
                seed,
            };
            model.meta = serde_json::json!({
                "attempts": state.next_attempt,
                "samples": samples.len(),
                "config_hash": setup.config_hash,
                "seed": seed,
            });
            state.metrics.push(row);
            if let Some(r) = report {
                state.reports.push(r);
            }
            if let (Some(dir), Some(w)) = (out_dir, writer.as_mut()) {
                w.flush()?;
                write_checkpoint(dir, &state, &model)?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        if state.next_attempt == sched.attempts && state.next_attempt % sched.retrain_interval != 0 {
            write_checkpoint(dir, &state, &model)?;
        }
    }
    Ok(TrainingRun { model, metrics: state.metrics.clone(), reports: state.reports.clone(), dataset, state })
}

/// Paths of the artifacts a training run writes into its output directory.
pub fn artifact_paths(dir: &Path) -> [PathBuf; 4] {
    [MODEL_FILE, DATASET_FILE, METRICS_FILE, CHECKPOINT_FILE].map(|f| dir.join(f))
}
