//! Synthetic bin-picking world: a walled bin with primitive objects that
//! settle onto the highest surface under their footprint.

mod projection;
mod shape;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use projection::{
    cast_ray, heightmap_to_cloud, project_pointcloud, ray_cast, synthetic_pointcloud, CameraPose, PinholeCamera,
    SceneHit,
};
pub use shape::{Hit, ObjectPose, Rest, RigidObject, Shape, Vec3};

use crate::error::{arg, Error, Result};
use crate::heightmap::Heightmap;
use crate::rng;

/// Rejection samples tried by [`place_random`] before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 100;

/// Step of the footprint grid used for settling.
const SETTLE_STEP: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinGeometry {
    /// Inner extent along x.
    pub length: f64,
    /// Inner extent along y.
    pub width: f64,
    pub wall_height: f64,
    pub wall_thickness: f64,
}

impl Default for BinGeometry {
    fn default() -> Self {
        Self { length: 0.30, width: 0.30, wall_height: 0.10, wall_thickness: 0.01 }
    }
}

impl BinGeometry {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.length) && pos(self.width) && pos(self.wall_thickness)) || !(self.wall_height >= 0.0) {
            return Err(Error::Config(format!("invalid bin geometry {self:?}")));
        }
        Ok(())
    }

    /// Wall height at a point, `None` off the wall.
    pub fn wall_at(&self, x: f64, y: f64) -> Option<f64> {
        let (hx, hy) = (self.length / 2.0, self.width / 2.0);
        let t = self.wall_thickness;
        let (ax, ay) = (x.abs(), y.abs());
        let in_outer = ax <= hx + t && ay <= hy + t;
        let in_inner = ax < hx && ay < hy;
        (in_outer && !in_inner).then_some(self.wall_height)
    }

    /// Outer XY bounds `[x_min, y_min, x_max, y_max]`.
    pub fn outer_bounds(&self) -> [f64; 4] {
        let hx = self.length / 2.0 + self.wall_thickness;
        let hy = self.width / 2.0 + self.wall_thickness;
        [-hx, -hy, hx, hy]
    }

    pub fn inner_bounds(&self) -> [f64; 4] {
        [-self.length / 2.0, -self.width / 2.0, self.length / 2.0, self.width / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub bin: BinGeometry,
    pub objects: Vec<RigidObject>,
    pub rng_seed: u64,
}

impl Scene {
    pub fn empty(bin: BinGeometry, rng_seed: u64) -> Self {
        Self { bin, objects: Vec::new(), rng_seed }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn object(&self, id: u64) -> Option<&RigidObject> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    pub fn next_id(&self) -> u64 {
        self.objects.iter().map(|o| o.object_id + 1).max().unwrap_or(0)
    }

    /// Highest object surface on the vertical line through `(x, y)`, ignoring walls.
    pub fn object_height_at(&self, x: f64, y: f64) -> Option<(f64, u64)> {
        self.objects
            .iter()
            .filter_map(|o| o.top_at(x, y).map(|h| (h, o.object_id)))
            .max_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Surface height including floor and walls.
    pub fn surface_height(&self, x: f64, y: f64) -> f64 {
        let mut h = self.bin.wall_at(x, y).unwrap_or(0.0);
        for o in &self.objects {
            if let Some(t) = o.top_at(x, y) {
                h = h.max(t);
            }
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(s)?;
        scene.bin.validate()?;
        if let Some(o) = scene.objects.iter().find(|o| !o.shape.is_valid()) {
            return Err(Error::Format(format!("object {} has invalid dimensions", o.object_id)));
        }
        Ok(scene)
    }
}

/// Object kinds drawn by the scene generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Cylinder,
    Sphere,
    /// Thin box leaning on its long edge.
    Plank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub objects: usize,
    pub kinds: Vec<ObjectKind>,
}

/// Size ranges of generated objects, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeRanges {
    pub box_side: [f64; 2],
    pub box_height: [f64; 2],
    pub cylinder_radius: [f64; 2],
    pub cylinder_height: [f64; 2],
    pub sphere_radius: [f64; 2],
    pub plank_length: [f64; 2],
    pub plank_thickness: [f64; 2],
    pub plank_depth: [f64; 2],
    /// Absolute lean angle, radians.
    pub plank_roll: [f64; 2],
}

impl Default for ShapeRanges {
    fn default() -> Self {
        Self {
            box_side: [0.02, 0.06],
            box_height: [0.02, 0.05],
            cylinder_radius: [0.012, 0.03],
            cylinder_height: [0.03, 0.07],
            sphere_radius: [0.015, 0.03],
            plank_length: [0.04, 0.07],
            plank_thickness: [0.012, 0.02],
            plank_depth: [0.03, 0.05],
            plank_roll: [0.5, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    #[serde(default)]
    pub bin: BinGeometry,
    pub stages: Vec<CurriculumStage>,
    #[serde(default)]
    pub shapes: ShapeRanges,
}

impl Default for SceneConfig {
    fn default() -> Self {
        use ObjectKind::*;
        Self {
            bin: BinGeometry::default(),
            stages: vec![
                CurriculumStage { objects: 1, kinds: vec![Box] },
                CurriculumStage { objects: 5, kinds: vec![Box, Cylinder] },
                CurriculumStage { objects: 10, kinds: vec![Box, Cylinder, Sphere] },
                CurriculumStage { objects: 20, kinds: vec![Box, Cylinder, Sphere, Plank] },
            ],
            shapes: ShapeRanges::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.bin.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("curriculum needs at least one stage".into()));
        }
        for w in self.stages.windows(2) {
            let grows = w[1].objects >= w[0].objects && w[0].kinds.iter().all(|k| w[1].kinds.contains(k));
            if !grows {
                return Err(Error::Config("curriculum stages must not shrink in count or kinds".into()));
            }
        }
        if self.stages.iter().any(|s| s.kinds.is_empty()) {
            return Err(Error::Config("every stage needs at least one object kind".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Draw an unplaced object of the given kind.
pub fn random_object(kind: ObjectKind, ranges: &ShapeRanges, id: u64, rng: &mut impl Rng) -> RigidObject {
    let pose = ObjectPose { x: 0.0, y: 0.0, yaw: 0.0, rest: Rest::Upright, z_base: 0.0 };
    let (shape, rest) = match kind {
        ObjectKind::Box => (
            Shape::Box {
                lx: uniform(rng, ranges.box_side),
                ly: uniform(rng, ranges.box_side),
                lz: uniform(rng, ranges.box_height),
            },
            Rest::Upright,
        ),
        ObjectKind::Cylinder => {
            let shape = Shape::Cylinder {
                radius: uniform(rng, ranges.cylinder_radius),
                height: uniform(rng, ranges.cylinder_height),
            };
            (shape, if rng.gen_bool(0.5) { Rest::Upright } else { Rest::Lying })
        }
        ObjectKind::Sphere => (Shape::Sphere { radius: uniform(rng, ranges.sphere_radius) }, Rest::Upright),
        ObjectKind::Plank => {
            let roll = uniform(rng, ranges.plank_roll) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (
                Shape::Box {
                    lx: uniform(rng, ranges.plank_depth),
                    ly: uniform(rng, ranges.plank_thickness),
                    lz: uniform(rng, ranges.plank_length),
                },
                Rest::Tilted { roll },
            )
        }
    };
    RigidObject { object_id: id, shape, pose: ObjectPose { rest, ..pose } }
}

/// Generate the scene of a curriculum stage. Deterministic in `(stage, seed)`.
pub fn sample_scene(cfg: &SceneConfig, stage: usize, seed: u64) -> Result<Scene> {
    let spec = cfg
        .stages
        .get(stage)
        .ok_or_else(|| Error::Config(format!("unknown curriculum stage {stage} (have {})", cfg.stages.len())))?;
    sample_scene_with(cfg, spec.objects, &spec.kinds, seed ^ rng::derive(stage as u64, &[]))
}

/// Generate a scene with an explicit object count and kind set.
pub fn sample_scene_with(cfg: &SceneConfig, count: usize, kinds: &[ObjectKind], seed: u64) -> Result<Scene> {
    if kinds.is_empty() {
        return arg("no object kinds to sample from");
    }
    let mut scene = Scene::empty(cfg.bin, seed);
    let mut rng = rng::stream(seed, &[rng::label::SCENE]);
    let mut failures = 0;
    while scene.len() < count {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let obj = random_object(kind, &cfg.shapes, scene.next_id(), &mut rng);
        match place_random(&scene, obj, rng.gen()) {
            Ok(s) => scene = s,
            Err(Error::Placement { .. }) if failures < 50 => failures += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(scene)
}

/// Remove an object by id.
pub fn remove_object(scene: &Scene, object_id: u64) -> Result<Scene> {
    let idx = scene
        .objects
        .iter()
        .position(|o| o.object_id == object_id)
        .ok_or(Error::NotFound { what: "object", id: object_id })?;
    let mut out = scene.clone();
    out.objects.remove(idx);
    Ok(out)
}

/// Height at which `obj` (posed at `z_base = 0`) comes to rest on `scene`.
pub fn support_height(scene: &Scene, obj: &RigidObject) -> f64 {
    let [x0, y0, x1, y1] = obj.footprint_bounds();
    let others: Vec<&RigidObject> = scene
        .objects
        .iter()
        .filter(|o| {
            let [a0, b0, a1, b1] = o.footprint_bounds();
            a0 <= x1 && a1 >= x0 && b0 <= y1 && b1 >= y0
        })
        .collect();
    if others.is_empty() {
        return 0.0;
    }
    let nx = ((x1 - x0) / SETTLE_STEP).ceil() as usize + 1;
    let ny = ((y1 - y0) / SETTLE_STEP).ceil() as usize + 1;
    let mut support: f64 = 0.0;
    for j in 0..ny {
        let y = (y0 + j as f64 * SETTLE_STEP).min(y1);
        for i in 0..nx {
            let x = (x0 + i as f64 * SETTLE_STEP).min(x1);
            let Some(bottom) = obj.bottom_at(x, y) else { continue };
            for o in &others {
                if let Some(h) = o.top_at(x, y) {
                    support = support.max(h - bottom);
                }
            }
        }
    }
    support.max(0.0)
}

/// Place an object at a uniformly sampled planar pose inside the bin, settled
/// onto whatever lies beneath it. Fails when no sample keeps the object below
/// the wall rim.
pub fn place_random(scene: &Scene, obj: RigidObject, seed: u64) -> Result<Scene> {
    if !obj.shape.is_valid() {
        return arg(format!("object {} has invalid dimensions", obj.object_id));
    }
    if scene.object(obj.object_id).is_some() {
        return arg(format!("object id {} already present", obj.object_id));
    }
    let mut rng = rng::stream(seed, &[rng::label::PLACE]);
    let [bx0, by0, bx1, by1] = scene.bin.inner_bounds();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut cand = obj.clone();
        cand.pose.yaw = rng.gen_range(-PI..PI);
        cand.pose.x = 0.0;
        cand.pose.y = 0.0;
        cand.pose.z_base = 0.0;
        let h = cand.half_extents();
        let (lo_x, hi_x) = (bx0 + h.x, bx1 - h.x);
        let (lo_y, hi_y) = (by0 + h.y, by1 - h.y);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        cand.pose.x = uniform(&mut rng, [lo_x, hi_x]);
        cand.pose.y = uniform(&mut rng, [lo_y, hi_y]);
        cand.pose.z_base = support_height(scene, &cand);
        if cand.top() <= scene.bin.wall_height + 1e-12 {
            let mut out = scene.clone();
            out.objects.push(cand);
            return Ok(out);
        }
    }
    Err(Error::Placement { attempts: PLACEMENT_ATTEMPTS })
}

/// Regular grid of a heightmap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
}

/// Default resolution: 32 px span about 11 cm.
pub const DEFAULT_RESOLUTION: f64 = 0.11 / 32.0;

impl GridSpec {
    /// A square grid of `size` cells centered on the origin.
    pub fn centered(size: usize, resolution: f64) -> Self {
        let half = size as f64 * resolution / 2.0;
        Self { width: size, height: size, resolution, origin: [-half, -half] }
    }

    pub fn extent(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.width as f64 * self.resolution,
            self.origin[1] + self.height as f64 * self.resolution,
        ]
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::centered(110, DEFAULT_RESOLUTION)
    }
}

/// Top-down orthographic render: every cell holds the highest surface on the
/// vertical line through its center.
pub fn render_heightmap(scene: &Scene, grid: &GridSpec) -> Result<Heightmap> {
    if !(grid.resolution > 0.0) || !grid.resolution.is_finite() {
        return arg(format!("resolution must be positive, got {}", grid.resolution));
    }
    let [ex0, ey0, ex1, ey1] = grid.extent();
    let [bx0, by0, bx1, by1] = scene.bin.outer_bounds();
    let tol = 1e-9;
    if ex0 > bx0 + tol || ey0 > by0 + tol || ex1 < bx1 - tol || ey1 < by1 - tol {
        return arg("render extent does not cover the bin");
    }
    render_region(scene, grid)
}

/// Render without the coverage check, for local patches.
pub fn render_region(scene: &Scene, grid: &GridSpec) -> Result<Heightmap> {
    let mut hm = Heightmap::new(grid.width, grid.height, grid.resolution, grid.origin, 0.0)?;
    hm.set_wall_height(scene.bin.wall_height);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let [x, y] = hm.cell_center(r, c);
            let mut h = scene.bin.wall_at(x, y).unwrap_or(0.0);
            for o in &scene.objects {
                if let Some(t) = o.top_at(x, y) {
                    h = h.max(t);
                }
            }
            hm.set(r, c, h as f32);
        }
    }
    Ok(hm)
}

impl RigidObject {
    /// Lowest surface point on the vertical line through `(x, y)`.
    pub fn bottom_at(&self, x: f64, y: f64) -> Option<f64> {
        let [x0, y0, x1, y1] = self.footprint_bounds();
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return None;
        }
        let start = self.pose.z_base - 1.0;
        let hit = self.ray_hit(&Vec3::new(x, y, start), &Vec3::new(0.0, 0.0, 1.0))?;
        Some(start + hit.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_obj(id: u64, lx: f64, ly: f64, lz: f64) -> RigidObject {
        RigidObject {
            object_id: id,
            shape: Shape::Box { lx, ly, lz },
            pose: ObjectPose { x: 0.0, y: 0.0, yaw: 0.0, rest: Rest::Upright, z_base: 0.0 },
        }
    }

    #[test]
    fn stage_zero_has_one_object_and_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = sample_scene(&cfg, 0, 7).unwrap();
        let b = sample_scene(&cfg, 0, 7).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn stage_three_has_twenty_objects() {
        let s = sample_scene(&SceneConfig::default(), 3, 1).unwrap();
        assert_eq!(s.len(), 20);
    }

    #[test]
    fn unknown_stage_is_config_error() {
        assert!(matches!(sample_scene(&SceneConfig::default(), 9, 1), Err(Error::Config(_))));
    }

    #[test]
    fn object_count_non_decreasing_in_stage() {
        let cfg = SceneConfig::default();
        let counts: Vec<usize> = (0..cfg.stages.len()).map(|s| sample_scene(&cfg, s, 3).unwrap().len()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn empty_bin_render() {
        let scene = Scene::empty(BinGeometry::default(), 0);
        let hm = render_heightmap(&scene, &GridSpec::default()).unwrap();
        let c = hm.width() / 2;
        assert_eq!(hm.get(c, c), Some(0.0));
        // a cell on the +x wall
        let (r, col) = hm.cell_of(0.155, 0.0).unwrap();
        assert_eq!(hm.get(r, col), Some(0.1));
    }

    #[test]
    fn single_box_footprint_height() {
        let mut scene = Scene::empty(BinGeometry::default(), 0);
        scene.objects.push(box_obj(0, 0.04, 0.04, 0.05));
        let hm = render_heightmap(&scene, &GridSpec::default()).unwrap();
        let (r, c) = hm.cell_of(0.001, 0.001).unwrap();
        assert!((hm.get(r, c).unwrap() - 0.05).abs() < 1e-7);
    }

    #[test]
    fn sphere_center_cell() {
        let mut scene = Scene::empty(BinGeometry::default(), 0);
        scene.objects.push(RigidObject {
            object_id: 0,
            shape: Shape::Sphere { radius: 0.03 },
            pose: ObjectPose { x: 0.0, y: 0.0, yaw: 0.0, rest: Rest::Upright, z_base: 0.0 },
        });
        let grid = GridSpec::default();
        let hm = render_heightmap(&scene, &grid).unwrap();
        let (r, c) = hm.cell_of(0.0, 0.0).unwrap();
        let h = hm.get(r, c).unwrap() as f64;
        // cell center sits half a pixel diagonally off the apex
        let d = grid.resolution / 2.0 * 2f64.sqrt();
        assert!((h - 0.06).abs() <= 0.06 - (0.03 + (0.03f64.powi(2) - d * d).sqrt()) + 1e-7);
    }

    #[test]
    fn bad_resolution_is_argument_error() {
        let scene = Scene::empty(BinGeometry::default(), 0);
        let grid = GridSpec { resolution: 0.0, ..GridSpec::default() };
        assert!(matches!(render_heightmap(&scene, &grid), Err(Error::Argument(_))));
    }

    #[test]
    fn remove_last_object_empties_scene() {
        let mut scene = Scene::empty(BinGeometry::default(), 0);
        scene.objects.push(box_obj(4, 0.03, 0.03, 0.03));
        assert!(remove_object(&scene, 4).unwrap().is_empty());
        assert!(matches!(remove_object(&scene, 5), Err(Error::NotFound { .. })));
    }

    #[test]
    fn placement_into_empty_bin_succeeds() {
        let scene = Scene::empty(BinGeometry::default(), 0);
        for seed in 0..20 {
            let s = place_random(&scene, box_obj(0, 0.05, 0.05, 0.05), seed).unwrap();
            assert_eq!(s.objects[0].pose.z_base, 0.0);
        }
    }

    #[test]
    fn overfilled_bin_raises_placement_error() {
        // floor area holds ten 0.1 m boxes; the rim forbids stacking
        let bin = BinGeometry { length: 0.5, width: 0.2, wall_height: 0.1, wall_thickness: 0.01 };
        let mut scene = Scene::empty(bin, 0);
        let mut err = None;
        for i in 0..30 {
            match place_random(&scene, box_obj(i, 0.1, 0.1, 0.1), 100 + i) {
                Ok(s) => scene = s,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert!(matches!(err, Some(Error::Placement { .. })));
        assert!(scene.len() <= 10);
    }

    #[test]
    fn stacked_object_rests_on_top() {
        let mut scene = Scene::empty(BinGeometry::default(), 0);
        scene.objects.push(box_obj(0, 0.3, 0.3, 0.02));
        let s = place_random(&scene, box_obj(1, 0.03, 0.03, 0.03), 3).unwrap();
        assert!((s.objects[1].pose.z_base - 0.02).abs() < 1e-12);
    }

    #[test]
    fn scene_json_roundtrip() {
        let s = sample_scene(&SceneConfig::default(), 2, 11).unwrap();
        assert_eq!(Scene::from_json(&s.to_json().unwrap()).unwrap(), s);
    }
}
