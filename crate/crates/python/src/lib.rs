//! Python bindings. Configs go in as dicts shaped like the TOML/JSON files,
//! results come back as dicts.

use std::collections::HashSet;
use std::path::PathBuf;

use hybrid_grasp::collision::{self, Axis, GripperGeometry, Profile};
use hybrid_grasp::grasp_sim::{self, SimConfig};
use hybrid_grasp::heightmap::Heightmap as CoreHeightmap;
use hybrid_grasp::imaging::{extract_window, DEFAULT_WINDOW};
use hybrid_grasp::lateral_controller::{self, ControllerConfig};
use hybrid_grasp::policy::{self, CellIndex, PlannerConfig, Scenario, Strategy, TrainingSetup, WorldConfig};
use hybrid_grasp::reward_model::{init_model, ModelSpec, RewardModel};
use hybrid_grasp::scene::{self as core_scene, GridSpec, SceneConfig};
use hybrid_grasp::{rng, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Argument(_)
        | Error::Config(_)
        | Error::NotFound { .. }
        | Error::Range { .. }
        | Error::Format(_)
        | Error::Integrity(_)
        | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for hybrid_grasp::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Missing dict means defaults.
fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else { return Ok(T::default()) };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Heightmap", module = "hybrid_grasp_py", from_py_object)]
#[derive(Clone)]
struct PyHeightmap(CoreHeightmap);

#[pymethods]
impl PyHeightmap {
    /// Load `stem.pgm` with its `stem.json` sidecar.
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        CoreHeightmap::load(&stem).py().map(Self)
    }

    fn save(&self, stem: PathBuf) -> PyResult<()> {
        self.0.save(&stem).py()
    }

    /// `(height, width)` in pixels.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.0.resolution()
    }

    #[getter]
    fn origin(&self) -> [f64; 2] {
        self.0.origin()
    }

    #[getter]
    fn wall_height(&self) -> f64 {
        self.0.wall_height()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<Option<f32>> {
        if row >= self.0.height() || col >= self.0.width() {
            return Err(PyValueError::new_err(format!("pixel ({row}, {col}) outside the heightmap")));
        }
        Ok(self.0.get(row, col))
    }

    fn height_at(&self, x: f64, y: f64) -> Option<f32> {
        self.0.height_at(x, y)
    }

    /// Rows of heights, `None` where unknown.
    fn to_list(&self) -> Vec<Vec<Option<f32>>> {
        (0..self.0.height()).map(|r| (0..self.0.width()).map(|c| self.0.get(r, c)).collect()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Heightmap({}x{}, {:.5} m/px)", self.0.width(), self.0.height(), self.0.resolution())
    }
}

#[pyclass(name = "Scene", module = "hybrid_grasp_py", from_py_object)]
#[derive(Clone)]
struct PyScene(core_scene::Scene);

#[pymethods]
impl PyScene {
    /// Random scene for a curriculum stage.
    #[staticmethod]
    #[pyo3(signature = (stage, seed, config=None))]
    fn sample(stage: usize, seed: u64, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: SceneConfig = from_py(config)?;
        core_scene::sample_scene(&cfg, stage, seed).py().map(Self)
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0, bin=None))]
    fn empty(seed: u64, bin: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        Ok(Self(core_scene::Scene::empty(from_py(bin)?, seed)))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        core_scene::Scene::from_json(text).py().map(Self)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().py()
    }

    #[getter]
    fn objects<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.objects)
    }

    #[pyo3(signature = (grid=None))]
    fn render(&self, grid: Option<&Bound<'_, PyAny>>) -> PyResult<PyHeightmap> {
        let grid: GridSpec = from_py(grid)?;
        core_scene::render_heightmap(&self.0, &grid).py().map(PyHeightmap)
    }

    fn remove(&self, object_id: u64) -> PyResult<Self> {
        core_scene::remove_object(&self.0, object_id).py().map(Self)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Scene({} objects)", self.0.len())
    }
}

/// Gripper primitive `m` at `(x, y, z)` with yaw `a` and lateral tilts `b`, `c`.
#[pyclass(name = "GraspAction", module = "hybrid_grasp_py", from_py_object)]
#[derive(Clone)]
struct PyGraspAction(grasp_sim::GraspAction);

#[pymethods]
impl PyGraspAction {
    #[new]
    #[pyo3(signature = (m, x, y, z, a, b=0.0, c=0.0))]
    fn new(m: usize, x: f64, y: f64, z: f64, a: f64, b: f64, c: f64) -> Self {
        Self(grasp_sim::GraspAction { m, x, y, z, a, b, c })
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m
    }
    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }
    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }
    #[getter]
    fn z(&self) -> f64 {
        self.0.z
    }
    #[getter]
    fn a(&self) -> f64 {
        self.0.a
    }
    #[getter]
    fn b(&self) -> f64 {
        self.0.b
    }
    #[getter]
    fn c(&self) -> f64 {
        self.0.c
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        let g = &self.0;
        format!("GraspAction(m={}, x={:.4}, y={:.4}, z={:.4}, a={:.4}, b={:.4}, c={:.4})", g.m, g.x, g.y, g.z, g.a, g.b, g.c)
    }
}

#[pyclass(name = "Model", module = "hybrid_grasp_py", from_py_object)]
#[derive(Clone)]
struct PyModel(RewardModel);

#[pymethods]
impl PyModel {
    /// Freshly initialized network.
    #[staticmethod]
    #[pyo3(signature = (seed, spec=None))]
    fn init(seed: u64, spec: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let spec: ModelSpec = from_py(spec)?;
        init_model(&spec, seed).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RewardModel::load(&path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    #[getter]
    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.spec)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.params.len()
    }

    /// Score every (rotation, row, col, primitive) cell of the heightmap.
    #[pyo3(signature = (heightmap, n_rot=20))]
    fn infer(&self, py: Python<'_>, heightmap: &PyHeightmap, n_rot: usize) -> PyResult<PyRewardMap> {
        py.detach(|| policy::infer_grid(&self.0, &heightmap.0, n_rot)).py().map(PyRewardMap)
    }
}

#[pyclass(name = "RewardMap", module = "hybrid_grasp_py", from_py_object)]
#[derive(Clone)]
struct PyRewardMap(policy::RewardMap);

impl PyRewardMap {
    fn cell(&self, k: usize, i: usize, j: usize, m: usize) -> PyResult<CellIndex> {
        let g = &self.0.geometry;
        if k >= g.n_rot || i >= g.rows || j >= g.cols || m >= g.n_prim {
            return Err(PyValueError::new_err(format!("cell ({k}, {i}, {j}, {m}) outside the map")));
        }
        Ok(CellIndex { k, i, j, m })
    }
}

#[pymethods]
impl PyRewardMap {
    /// `(n_rot, rows, cols, n_prim)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let g = &self.0.geometry;
        (g.n_rot, g.rows, g.cols, g.n_prim)
    }

    /// Flat probabilities in `shape` order.
    #[getter]
    fn values(&self) -> Vec<f32> {
        self.0.values.clone()
    }

    fn value(&self, k: usize, i: usize, j: usize, m: usize) -> PyResult<f32> {
        Ok(self.0.value(self.cell(k, i, j, m)?))
    }

    /// World pose `(x, y, a)` of a cell.
    fn pose(&self, k: usize, i: usize, j: usize) -> PyResult<(f64, f64, f64)> {
        Ok(self.0.geometry.pose(self.cell(k, i, j, 0)?))
    }

    /// Highest-scoring cell as `(k, i, j, m, probability)`.
    fn best(&self) -> PyResult<(usize, usize, usize, usize, f32)> {
        let idx = *policy::top_k(&self.0, &HashSet::new(), 1).first().ok_or_else(|| PyValueError::new_err("empty map"))?;
        let c = self.0.geometry.cell(idx);
        Ok((c.k, c.i, c.j, c.m, self.0.values[idx]))
    }

    /// Max over rotations and primitives per heightmap pixel: `(width, height, values)`.
    fn max_projection(&self) -> (usize, usize, Vec<Option<f32>>) {
        self.0.max_projection()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
#[pyo3(signature = (heightmap, action, gripper=None))]
fn check_grasp_collision(heightmap: &PyHeightmap, action: &PyGraspAction, gripper: Option<&Bound<'_, PyAny>>) -> PyResult<bool> {
    let grip: GripperGeometry = from_py(gripper)?;
    Ok(collision::check_grasp_collision(&heightmap.0, &action.0, &grip))
}

/// Collision-free approach angles for a profile of `(distance, height)`
/// columns in one tilt plane, `axis` "b" or "c".
#[pyfunction]
#[pyo3(signature = (profile, axis="b", gripper=None))]
fn free_interval(profile: Vec<[f64; 2]>, axis: &str, gripper: Option<&Bound<'_, PyAny>>) -> PyResult<(f64, f64)> {
    let axis = match axis {
        "b" => Axis::B,
        "c" => Axis::C,
        other => return Err(PyValueError::new_err(format!("axis must be \"b\" or \"c\", got {other:?}"))),
    };
    let grip: GripperGeometry = from_py(gripper)?;
    let p = Profile::new(axis, profile).py()?;
    let fi = collision::free_interval(&p, &grip).py()?;
    Ok((fi.alpha_min, fi.alpha_max))
}

/// Approach height and lateral angles at a pose.
#[pyfunction]
#[pyo3(signature = (heightmap, x, y, a, m, gripper=None, controller=None))]
#[allow(clippy::too_many_arguments)]
fn lateral_control<'py>(
    py: Python<'py>,
    heightmap: &PyHeightmap,
    x: f64,
    y: f64,
    a: f64,
    m: usize,
    gripper: Option<&Bound<'py, PyAny>>,
    controller: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let grip: GripperGeometry = from_py(gripper)?;
    let ctrl: ControllerConfig = from_py(controller)?;
    let w = extract_window(&heightmap.0, x, y, a, DEFAULT_WINDOW).py()?;
    let z = grasp_sim::compute_z(&w, &grip, m, &SimConfig::default()).py()?;
    let angles = lateral_controller::lateral_control(&w, m, &grip, &ctrl, z).py()?;
    let out = to_py(py, &angles)?;
    out.set_item("z", z)?;
    Ok(out)
}

fn strategy(name: &str, temperature: f64, epsilon: f64) -> PyResult<Strategy> {
    let s = match name {
        "greedy" => Strategy::Greedy,
        "boltzmann" => Strategy::Boltzmann { temperature },
        "epsilon-greedy" | "epsilon_greedy" => Strategy::EpsilonGreedy { epsilon },
        "random" => Strategy::Random,
        other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
    };
    s.validate().py()?;
    Ok(s)
}

/// Select and check cells of `reward_map` until one yields a collision-free
/// grasp. Returns a dict with the action and how it was found.
#[pyfunction]
#[pyo3(signature = (heightmap, reward_map, strategy="greedy", seed=0, temperature=0.1, epsilon=0.1, planner=None))]
#[allow(clippy::too_many_arguments)]
fn plan_grasp<'py>(
    py: Python<'py>,
    heightmap: &PyHeightmap,
    reward_map: &PyRewardMap,
    strategy: &str,
    seed: u64,
    temperature: f64,
    epsilon: f64,
    planner: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = self::strategy(strategy, temperature, epsilon)?;
    let cfg: PlannerConfig = from_py(planner)?;
    let mut rng = rng::stream(seed, &[rng::label::SELECT]);
    let plan = py
        .detach(|| policy::plan_grasp(&heightmap.0, &reward_map.0, &s, &cfg, &mut rng, &mut HashSet::new(), None))
        .py()?;
    let out = to_py(py, &plan.candidate)?;
    out.set_item("accepted", plan.accepted())?;
    out.set_item("rejections", plan.rejections)?;
    out.set_item("action", PyGraspAction(plan.candidate.action.clone()))?;
    Ok(out)
}

/// Simulate one grasp. Returns `(outcome, scene_after)`.
#[pyfunction]
#[pyo3(signature = (scene, action, seed, gripper=None, sim=None))]
fn execute_grasp<'py>(
    py: Python<'py>,
    scene: &PyScene,
    action: &PyGraspAction,
    seed: u64,
    gripper: Option<&Bound<'py, PyAny>>,
    sim: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Bound<'py, PyAny>, PyScene)> {
    let grip: GripperGeometry = from_py(gripper)?;
    let sim: SimConfig = from_py(sim)?;
    let (out, after) = grasp_sim::execute_grasp(&scene.0, &action.0, &grip, &sim, seed).py()?;
    Ok((to_py(py, &out)?, PyScene(after)))
}

/// Run the self-supervised training loop. With `out_dir` the run writes its
/// model, dataset, metrics and checkpoint there.
#[pyfunction]
#[pyo3(signature = (seed, setup=None, out_dir=None, stop_after=None))]
fn run_training<'py>(
    py: Python<'py>,
    seed: u64,
    setup: Option<&Bound<'py, PyAny>>,
    out_dir: Option<PathBuf>,
    stop_after: Option<usize>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let setup: TrainingSetup = from_py(setup)?;
    setup.validate().py()?;
    let run = py.detach(|| policy::run_training(&setup, seed, out_dir.as_deref(), stop_after)).py()?;
    Ok((PyModel(run.model), to_py(py, &run.metrics)?))
}

/// Grasp rate of a scenario; `policy` in the scenario dict picks model,
/// random or oracle.
#[pyfunction]
#[pyo3(signature = (scenario, trials, seed, model=None, world=None, n_rot=20, top_k=5))]
#[allow(clippy::too_many_arguments)]
fn evaluate_grasp_rate<'py>(
    py: Python<'py>,
    scenario: &Bound<'py, PyAny>,
    trials: usize,
    seed: u64,
    model: Option<&PyModel>,
    world: Option<&Bound<'py, PyAny>>,
    n_rot: usize,
    top_k: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let text: String = py.import("json")?.call_method1("dumps", (scenario,))?.extract()?;
    let scenario: Scenario = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let world: WorldConfig = from_py(world)?;
    let report = py
        .detach(|| policy::evaluate_grasp_rate(model.map(|m| &m.0), &scenario, &world, n_rot, top_k, trials, seed))
        .py()?;
    to_py(py, &report)
}

/// 95 % Wilson interval for a binomial rate.
#[pyfunction]
fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    policy::wilson_interval(successes, n)
}

#[pymodule]
fn hybrid_grasp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHeightmap>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyGraspAction>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRewardMap>()?;
    m.add_function(wrap_pyfunction!(check_grasp_collision, m)?)?;
    m.add_function(wrap_pyfunction!(free_interval, m)?)?;
    m.add_function(wrap_pyfunction!(lateral_control, m)?)?;
    m.add_function(wrap_pyfunction!(plan_grasp, m)?)?;
    m.add_function(wrap_pyfunction!(execute_grasp, m)?)?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_grasp_rate, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    Ok(())
}
