//! Point clouds: orthographic projection onto a height grid, and a synthetic
//! pinhole depth camera that produces clouds with viewing shadows.

use nalgebra::{Matrix3, Rotation3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GridSpec, ObjectPose, Rest, RigidObject, Scene, Shape, Vec3};
use crate::error::{arg, Result};
use crate::heightmap::Heightmap;

/// Camera-to-world transform. Camera axes: x right, y down, z along the view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
}

impl CameraPose {
    /// Camera at `(x, y, height)` looking straight down, image x along world x.
    pub fn top_down(x: f64, y: f64, height: f64) -> Self {
        Self { position: [x, y, height], rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]] }
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let eye_v = Vec3::from(eye);
        let z = Vec3::from(target) - eye_v;
        if z.norm() < 1e-12 {
            return arg("camera eye and target coincide");
        }
        let z = z.normalize();
        let x = z.cross(&Vec3::from(up));
        if x.norm() < 1e-12 {
            return arg("camera up vector is parallel to the view direction");
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let m = Matrix3::from_columns(&[x, y, z]);
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        Ok(Self { position: eye, rotation })
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.matrix() * p + Vec3::from(self.position)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.matrix().transpose() * (p - Vec3::from(self.position))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.matrix();
        let err = (m.transpose() * m - Matrix3::identity()).norm();
        if !err.is_finite() || err > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
            return arg("camera rotation is not a proper rotation matrix");
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            return arg("camera position is not finite");
        }
        Ok(())
    }
}

/// Orthographic z-buffer projection of a camera-frame cloud onto `grid`.
/// Cells without any point stay masked unknown.
pub fn project_pointcloud(points: &[[f64; 3]], camera: &CameraPose, grid: &GridSpec) -> Result<Heightmap> {
    if points.is_empty() {
        return arg("point cloud is empty");
    }
    camera.validate()?;
    let mut hm = Heightmap::unknown(grid.width, grid.height, grid.resolution, grid.origin)?;
    for p in points {
        let w = camera.to_world(&Vec3::from(*p));
        if !w.iter().all(|v| v.is_finite()) {
            continue;
        }
        let Some((r, c)) = hm.cell_of(w.x, w.y) else { continue };
        let h = w.z.max(0.0) as f32;
        match hm.get(r, c) {
            Some(old) if old >= h => {}
            _ => hm.set(r, c, h),
        }
    }
    Ok(hm)
}

/// Camera-frame cloud with one point per known cell center of `hm`.
pub fn heightmap_to_cloud(hm: &Heightmap, camera: &CameraPose) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(hm.width() * hm.height());
    for r in 0..hm.height() {
        for c in 0..hm.width() {
            if let Some(h) = hm.get(r, c) {
                let [x, y] = hm.cell_center(r, c);
                let p = camera.to_camera(&Vec3::new(x, y, h as f64));
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Returns beyond this range are dropped.
    pub max_range: f64,
}

impl PinholeCamera {
    /// Square sensor with the given full field of view.
    pub fn with_fov(size: usize, fov: f64) -> Self {
        let f = size as f64 / 2.0 / (fov / 2.0).tan();
        let c = size as f64 / 2.0;
        Self { width: size, height: size, fx: f, fy: f, cx: c, cy: c, max_range: 5.0 }
    }
}

fn wall_solids(scene: &Scene) -> Vec<RigidObject> {
    let b = &scene.bin;
    if b.wall_height <= 0.0 {
        return Vec::new();
    }
    let t = b.wall_thickness;
    let (hx, hy) = (b.length / 2.0, b.width / 2.0);
    let slab = |x: f64, y: f64, lx: f64, ly: f64| RigidObject {
        object_id: u64::MAX,
        shape: Shape::Box { lx, ly, lz: b.wall_height },
        pose: ObjectPose { x, y, yaw: 0.0, rest: Rest::Upright, z_base: 0.0 },
    };
    vec![
        slab(hx + t / 2.0, 0.0, t, b.width + 2.0 * t),
        slab(-hx - t / 2.0, 0.0, t, b.width + 2.0 * t),
        slab(0.0, hy + t / 2.0, b.length, t),
        slab(0.0, -hy - t / 2.0, b.length, t),
    ]
}

/// Nearest surface along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneHit {
    pub t: f64,
    pub normal: Vec3,
    /// `None` for the floor and walls.
    pub object: Option<u64>,
}

/// First hit of a ray against floor, walls and objects.
pub fn ray_cast(scene: &Scene, origin: &Vec3, dir: &Vec3) -> Option<SceneHit> {
    let mut best: Option<SceneHit> = None;
    let mut keep = |t: f64, normal: Vec3, object: Option<u64>| {
        if best.map_or(true, |b| t < b.t) {
            best = Some(SceneHit { t, normal, object });
        }
    };
    if dir.z < -1e-12 && origin.z >= 0.0 {
        keep(-origin.z / dir.z, Vec3::z(), None);
    }
    for o in &scene.objects {
        if let Some(h) = o.ray_hit(origin, dir) {
            keep(h.t, h.normal, Some(o.object_id));
        }
    }
    for w in wall_solids(scene) {
        if let Some(h) = w.ray_hit(origin, dir) {
            keep(h.t, h.normal, None);
        }
    }
    best
}

/// First world-space hit point of a ray against floor, walls and objects.
pub fn cast_ray(scene: &Scene, origin: &Vec3, dir: &Vec3) -> Option<Vec3> {
    ray_cast(scene, origin, dir).map(|h| origin + dir * h.t)
}

/// Render a depth camera view of `scene` as a camera-frame point cloud.
/// Surfaces hidden from the camera produce no points, so projecting the cloud
/// leaves them masked.
pub fn synthetic_pointcloud(scene: &Scene, intrinsics: &PinholeCamera, pose: &CameraPose) -> Result<Vec<[f64; 3]>> {
    pose.validate()?;
    if intrinsics.width == 0 || intrinsics.height == 0 || !(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0) {
        return arg("camera intrinsics must be positive");
    }
    let rot = Rotation3::from_matrix_unchecked(pose.matrix());
    let origin = Vec3::from(pose.position);
    let rows: Vec<Vec<[f64; 3]>> = (0..intrinsics.height)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::new();
            for u in 0..intrinsics.width {
                let d_cam = Vec3::new(
                    (u as f64 + 0.5 - intrinsics.cx) / intrinsics.fx,
                    (v as f64 + 0.5 - intrinsics.cy) / intrinsics.fy,
                    1.0,
                );
                let d = rot * d_cam.normalize();
                if let Some(p) = cast_ray(scene, &origin, &d) {
                    if (p - origin).norm() <= intrinsics.max_range {
                        let q = pose.to_camera(&p);
                        row.push([q.x, q.y, q.z]);
                    }
                }
            }
            row
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_heightmap, BinGeometry};

    #[test]
    fn single_point_sets_one_cell() {
        let grid = GridSpec::centered(10, 0.01);
        let cam = CameraPose::top_down(0.0, 0.0, 1.0);
        // world (0.005, 0.005, 0.02) is the center of cell (5, 5)
        let p = cam.to_camera(&Vec3::new(0.005, 0.005, 0.02));
        let hm = project_pointcloud(&[[p.x, p.y, p.z]], &cam, &grid).unwrap();
        let known: Vec<_> = (0..10).flat_map(|r| (0..10).map(move |c| (r, c))).filter(|&(r, c)| hm.get(r, c).is_some()).collect();
        assert_eq!(known, vec![(5, 5)]);
        assert!((hm.get(5, 5).unwrap() - 0.02).abs() < 1e-7);
    }

    #[test]
    fn z_buffer_keeps_maximum() {
        let grid = GridSpec::centered(4, 0.01);
        let cam = CameraPose::top_down(0.0, 0.0, 1.0);
        let pts: Vec<[f64; 3]> = [0.01, 0.03]
            .iter()
            .map(|&z| {
                let p = cam.to_camera(&Vec3::new(0.001, 0.002, z));
                [p.x, p.y, p.z]
            })
            .collect();
        let hm = project_pointcloud(&pts, &cam, &grid).unwrap();
        assert!((hm.height_at(0.001, 0.002).unwrap() - 0.03).abs() < 1e-7);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let cam = CameraPose::top_down(0.0, 0.0, 1.0);
        assert!(project_pointcloud(&[], &cam, &GridSpec::default()).is_err());
    }

    #[test]
    fn render_cloud_roundtrip() {
        let scene = crate::scene::sample_scene(&Default::default(), 2, 5).unwrap();
        let grid = GridSpec::default();
        let hm = render_heightmap(&scene, &grid).unwrap();
        let cam = CameraPose::look_at([0.1, -0.2, 0.9], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let back = project_pointcloud(&heightmap_to_cloud(&hm, &cam), &cam, &grid).unwrap();
        for r in 0..grid.height {
            for c in 0..grid.width {
                let (a, b) = (hm.get(r, c).unwrap(), back.get(r, c).unwrap());
                assert!((a - b).abs() <= grid.resolution as f32);
            }
        }
    }

    #[test]
    fn oblique_camera_leaves_shadow_behind_box() {
        let mut scene = Scene::empty(BinGeometry::default(), 0);
        scene.objects.push(RigidObject {
            object_id: 0,
            shape: Shape::Box { lx: 0.04, ly: 0.04, lz: 0.06 },
            pose: ObjectPose { x: 0.0, y: 0.0, yaw: 0.0, rest: Rest::Upright, z_base: 0.0 },
        });
        let cam = CameraPose::look_at([-0.3, 0.0, 0.6], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let cloud = synthetic_pointcloud(&scene, &PinholeCamera::with_fov(200, 0.9), &cam).unwrap();
        let hm = project_pointcloud(&cloud, &cam, &GridSpec::default()).unwrap();
        // top face visible, floor just past the far edge hidden
        assert!((hm.height_at(0.0, 0.0).unwrap() - 0.06).abs() < 1e-6);
        assert!(hm.height_at(0.03, 0.0).is_none());
        assert!(hm.height_at(-0.05, 0.0).unwrap().abs() < 1e-6);
    }
}
