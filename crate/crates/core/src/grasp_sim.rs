//! Geometric stand-in for executing a grasp: approach along the tool axis,
//! stop on finger contact, close the jaws, score the contacts and decide the
//! binary reward.

use std::fmt;

use nalgebra::Rotation3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collision::GripperGeometry;
use crate::error::{Error, Result};
use crate::imaging::Window;
use crate::rng;
use crate::scene::{ray_cast, remove_object, Scene, Vec3};

/// Primitive index plus a full grasp pose. `(x, y, z)` is the point between
/// the fingertips; the orientation is `Rz(a) Ry(b) Rx(-c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspAction {
    pub m: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl GraspAction {
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vec3::z_axis(), self.a)
            * Rotation3::from_axis_angle(&Vec3::y_axis(), self.b)
            * Rotation3::from_axis_angle(&Vec3::x_axis(), -self.c)
    }

    /// Unit vector from the fingertips toward the gripper body.
    pub fn tool_axis(&self) -> Vec3 {
        self.rotation() * Vec3::z()
    }

    /// Unit closing axis; the left jaw sits on its negative side.
    pub fn jaw_axis(&self) -> Vec3 {
        self.rotation() * Vec3::y()
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.z, self.a, self.b, self.c].iter().all(|v| v.is_finite())
    }

    pub fn validate(&self, grip: &GripperGeometry) -> Result<()> {
        use std::f64::consts::{FRAC_PI_2, PI};
        let ok = self.is_finite()
            && self.m < grip.n_primitives()
            && self.a.abs() <= PI + 1e-9
            && self.b.abs() <= FRAC_PI_2
            && self.c.abs() <= FRAC_PI_2;
        if ok {
            Ok(())
        } else {
            Err(Error::Logic(format!("malformed grasp action {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspEvent {
    ApproachContact,
    CollisionAbort,
    RangeViolation,
    LiftOk,
    LiftSlip,
}

impl fmt::Display for GraspEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GraspEvent::ApproachContact => "approach_contact",
            GraspEvent::CollisionAbort => "collision_abort",
            GraspEvent::RangeViolation => "range_violation",
            GraspEvent::LiftOk => "lift_ok",
            GraspEvent::LiftSlip => "lift_slip",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub reward: u8,
    pub d_final: f64,
    pub events: Vec<GraspEvent>,
    pub quality: f64,
    /// Object held between the jaws, if both touched the same one.
    pub object_id: Option<u64>,
}

impl AttemptOutcome {
    pub fn collided(&self) -> bool {
        self.events.contains(&GraspEvent::CollisionAbort)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// How far below the highest point under the jaws the fingertips go.
    pub approach_depth: f64,
    pub q_min: f64,
    /// Narrowest object that counts as held.
    pub w_min: f64,
    /// Back-off after a finger touches during approach.
    pub retract: f64,
    /// Drop held objects with probability `1 - q`.
    pub slip: bool,
    /// Spacing of the contact sample grids.
    pub sample_step: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { approach_depth: 0.015, q_min: 0.75, w_min: 0.002, retract: 0.003, slip: false, sample_step: 0.0025 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.approach_depth >= 0.0
            && (0.0..=1.0).contains(&self.q_min)
            && self.w_min >= 0.0
            && self.retract >= 0.0
            && self.sample_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid simulation config {self:?}")))
        }
    }
}

/// Fingertip height for a primitive: highest known cell under the pre-shaped
/// jaws minus the approach depth, never below the floor.
pub fn compute_z(w: &Window, grip: &GripperGeometry, m: usize, cfg: &SimConfig) -> Result<f64> {
    let stroke = grip.stroke(m)?;
    let n = w.size();
    let mid = [n / 2 - 1, n / 2];
    if mid.iter().any(|&r| mid.iter().any(|&c| w.image.is_masked(r, c))) {
        return Err(Error::Rejected("unknown cells at the grasp point".into()));
    }
    let half_u = grip.finger_width / 2.0;
    let half_v = stroke / 2.0 + grip.finger_width;
    let mut top = f64::NEG_INFINITY;
    for r in 0..n {
        for c in 0..n {
            let [u, v] = w.offset(r, c);
            if u.abs() <= half_u && v.abs() <= half_v {
                if let Some(h) = w.image.get(r, c) {
                    top = top.max(h as f64);
                }
            }
        }
    }
    Ok((top - cfg.approach_depth).max(0.0))
}

fn grid(lo: f64, hi: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / step).ceil().max(1.0) as usize;
    (0..=n).map(move |i| lo + (hi - lo) * i as f64 / n as f64)
}

/// Height the tool origin sits above the target along the tool axis when
/// the first part of the gripper touches something; `None` if the path is clear.
struct Approach {
    finger: Option<f64>,
    body: Option<f64>,
}

const APPROACH_START: f64 = 1.0;

fn approach(scene: &Scene, action: &GraspAction, grip: &GripperGeometry, stroke: f64, step: f64) -> Approach {
    let rot = action.rotation();
    let axis = rot * Vec3::z();
    let target = Vec3::new(action.x, action.y, action.z);
    let down = -axis;
    let first_touch = |p: Vec3| -> Option<f64> {
        let start = target + rot * p + axis * APPROACH_START;
        let hit = ray_cast(scene, &start, &down)?;
        let lift = APPROACH_START - hit.t;
        (lift > 0.0).then_some(lift)
    };
    let fw = grip.finger_width;
    let jaw = stroke / 2.0 + fw / 2.0;
    let mut finger = None::<f64>;
    for side in [-1.0, 1.0] {
        for x in grid(-fw / 2.0, fw / 2.0, step) {
            for y in grid(side * jaw - fw / 2.0, side * jaw + fw / 2.0, step) {
                if let Some(l) = first_touch(Vec3::new(x, y, 0.0)) {
                    finger = Some(finger.map_or(l, |f| f.max(l)));
                }
            }
        }
    }
    let mut body = None::<f64>;
    let span = grip.body_half_span();
    for x in grid(-grip.r_g, grip.r_g, step) {
        for y in grid(-span, span, step) {
            if let Some(l) = first_touch(Vec3::new(x, y, grip.d_l)) {
                body = Some(body.map_or(l, |b| b.max(l)));
            }
        }
    }
    Approach { finger, body }
}

struct Closing {
    /// Travel of the left and right jaw until contact.
    travel: [f64; 2],
    object: [Option<u64>; 2],
    /// Mean of `-n . inward` over each jaw's contact patch.
    alignment: [f64; 2],
}

/// Close both jaws from the pre-shape at tool offset `lift` above the target.
fn close_jaws(
    scene: &Scene,
    action: &GraspAction,
    grip: &GripperGeometry,
    stroke: f64,
    lift: f64,
    step: f64,
) -> Option<Closing> {
    let rot = action.rotation();
    let axis = rot * Vec3::z();
    let jaw = rot * Vec3::y();
    let origin = Vec3::new(action.x, action.y, action.z) + axis * lift;
    let fw = grip.finger_width;
    let mut out = Closing { travel: [0.0; 2], object: [None; 2], alignment: [0.0; 2] };
    for (k, side) in [-1.0f64, 1.0].into_iter().enumerate() {
        let inward = jaw * -side;
        let mut hits = Vec::new();
        for x in grid(-fw / 2.0, fw / 2.0, step) {
            for z in grid(0.0, grip.d_l, step) {
                let p = origin + rot * Vec3::new(x, side * stroke / 2.0, z);
                if let Some(h) = ray_cast(scene, &p, &inward) {
                    if h.t <= stroke {
                        hits.push(h);
                    }
                }
            }
        }
        let first = hits.iter().map(|h| h.t).fold(f64::INFINITY, f64::min);
        if !first.is_finite() {
            return None;
        }
        let patch: Vec<_> = hits.iter().filter(|h| h.t <= first + 0.001).collect();
        out.travel[k] = first;
        out.object[k] = patch.iter().find(|h| h.t == first).and_then(|h| h.object);
        out.alignment[k] = patch.iter().map(|h| -h.normal.dot(&inward)).sum::<f64>() / patch.len() as f64;
    }
    Some(out)
}

/// Antipodal score of closing the jaws at the target pose: 1 when both jaws
/// meet faces square on, 0 when nothing lies between them.
pub fn antipodal_quality(scene: &Scene, action: &GraspAction, grip: &GripperGeometry) -> Result<f64> {
    let stroke = grip.stroke(action.m)?;
    let step = SimConfig::default().sample_step;
    Ok(close_jaws(scene, action, grip, stroke, 0.0, step)
        .map(|c| (0.5 * (c.alignment[0] + c.alignment[1])).clamp(0.0, 1.0))
        .unwrap_or(0.0))
}

/// Run one grasp on `scene`. On success the held object is gone from the
/// returned scene.
pub fn execute_grasp(
    scene: &Scene,
    action: &GraspAction,
    grip: &GripperGeometry,
    cfg: &SimConfig,
    seed: u64,
) -> Result<(AttemptOutcome, Scene)> {
    action.validate(grip)?;
    let stroke = grip.stroke(action.m)?;
    let mut events = Vec::new();
    let fail = |events: Vec<GraspEvent>, d_final: f64| AttemptOutcome {
        reward: 0,
        d_final,
        events,
        quality: 0.0,
        object_id: None,
    };
    let [x0, y0, x1, y1] = scene.bin.inner_bounds();
    if action.x < x0 || action.x > x1 || action.y < y0 || action.y > y1 || action.z < 0.0 {
        return Ok((fail(vec![GraspEvent::RangeViolation], stroke), scene.clone()));
    }

    let step = cfg.sample_step;
    let ap = approach(scene, action, grip, stroke, step);
    let mut lift = 0.0;
    match (ap.finger, ap.body) {
        (_, Some(b)) if ap.finger.map_or(true, |f| b >= f) => {
            events.push(GraspEvent::CollisionAbort);
            return Ok((fail(events, stroke), scene.clone()));
        }
        (Some(f), _) => {
            events.push(GraspEvent::ApproachContact);
            lift = f + cfg.retract;
        }
        _ => {}
    }

    let Some(cl) = close_jaws(scene, action, grip, stroke, lift, step) else {
        events.push(GraspEvent::LiftSlip);
        return Ok((fail(events, 0.0), scene.clone()));
    };
    let d_final = (stroke - cl.travel[0] - cl.travel[1]).clamp(0.0, stroke);
    let quality = (0.5 * (cl.alignment[0] + cl.alignment[1])).clamp(0.0, 1.0);
    let held = match cl.object {
        [Some(a), Some(b)] if a == b => Some(a),
        _ => None,
    };
    let mut ok = held.is_some() && quality >= cfg.q_min && d_final > cfg.w_min && d_final <= stroke;
    if ok && cfg.slip {
        let mut rng = rng::stream(seed, &[rng::label::GRASP]);
        ok = rng.gen::<f64>() < quality;
    }
    let outcome = AttemptOutcome {
        reward: ok as u8,
        d_final,
        events: {
            events.push(if ok { GraspEvent::LiftOk } else { GraspEvent::LiftSlip });
            events
        },
        quality,
        object_id: held,
    };
    let next = match (ok, held) {
        (true, Some(id)) => remove_object(scene, id)?,
        _ => scene.clone(),
    };
    Ok((outcome, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BinGeometry, ObjectPose, Rest, RigidObject, Shape};
    use std::f64::consts::FRAC_PI_4;

    fn single(shape: Shape, rest: Rest) -> Scene {
        let mut s = Scene::empty(BinGeometry::default(), 0);
        s.objects.push(RigidObject {
            object_id: 3,
            shape,
            pose: ObjectPose { x: 0.0, y: 0.0, yaw: 0.0, rest, z_base: 0.0 },
        });
        s
    }

    fn top_grasp(m: usize, z: f64) -> GraspAction {
        GraspAction { m, x: 0.0, y: 0.0, z, a: 0.0, b: 0.0, c: 0.0 }
    }

    #[test]
    fn tool_frame_axes() {
        let g = GraspAction { b: 0.3, ..top_grasp(0, 0.0) };
        let t = g.tool_axis();
        assert!((t - Vec3::new(0.3f64.sin(), 0.0, 0.3f64.cos())).norm() < 1e-12);
        let g = GraspAction { c: 0.3, ..top_grasp(0, 0.0) };
        assert!((g.tool_axis() - Vec3::new(0.0, 0.3f64.sin(), 0.3f64.cos())).norm() < 1e-12);
        assert!((g.jaw_axis() - Vec3::new(0.0, 0.3f64.cos(), -0.3f64.sin())).norm() < 1e-12);
    }

    #[test]
    fn centered_box_is_grasped_and_removed() {
        let scene = single(Shape::Box { lx: 0.04, ly: 0.03, lz: 0.05 }, Rest::Upright);
        let (out, next) =
            execute_grasp(&scene, &top_grasp(1, 0.035), &GripperGeometry::default(), &SimConfig::default(), 0).unwrap();
        assert_eq!(out.reward, 1, "{out:?}");
        assert!((out.d_final - 0.03).abs() < 1e-9);
        assert!((out.quality - 1.0).abs() < 1e-9);
        assert!(next.is_empty());
    }

    #[test]
    fn closing_on_air_slips() {
        let scene = Scene::empty(BinGeometry::default(), 0);
        let (out, _) =
            execute_grasp(&scene, &top_grasp(1, 0.02), &GripperGeometry::default(), &SimConfig::default(), 0).unwrap();
        assert_eq!(out.reward, 0);
        assert_eq!(out.d_final, 0.0);
        assert_eq!(out.events, vec![GraspEvent::LiftSlip]);
    }

    #[test]
    fn box_wider_than_stroke_is_touched_not_held() {
        let scene = single(Shape::Box { lx: 0.04, ly: 0.06, lz: 0.05 }, Rest::Upright);
        let (out, next) =
            execute_grasp(&scene, &top_grasp(1, 0.035), &GripperGeometry::default(), &SimConfig::default(), 0).unwrap();
        assert_eq!(out.reward, 0);
        assert!(out.events.contains(&GraspEvent::ApproachContact));
        assert_eq!(next.len(), 1);
    }

    #[test]
    fn slanted_faces_score_cosine() {
        // thin plank rolled 45 degrees: both closing faces tilt by 45 degrees
        let scene = single(Shape::Box { lx: 0.04, ly: 0.015, lz: 0.06 }, Rest::Tilted { roll: FRAC_PI_4 });
        let top = scene.objects[0].top();
        let g = top_grasp(1, top - 0.015);
        let q = antipodal_quality(&scene, &g, &GripperGeometry::default()).unwrap();
        assert!((q - FRAC_PI_4.cos()).abs() < 1e-6, "{q}");
        let aligned = GraspAction { c: -FRAC_PI_4, ..g };
        let q = antipodal_quality(&scene, &aligned, &GripperGeometry::default()).unwrap();
        assert!(q > 0.99, "{q}");
    }

    #[test]
    fn nothing_between_jaws_scores_zero() {
        let scene = Scene::empty(BinGeometry::default(), 0);
        assert_eq!(antipodal_quality(&scene, &top_grasp(0, 0.01), &GripperGeometry::default()).unwrap(), 0.0);
    }

    #[test]
    fn malformed_action_is_logic_error() {
        let scene = Scene::empty(BinGeometry::default(), 0);
        let bad = GraspAction { m: 9, ..top_grasp(0, 0.0) };
        assert!(matches!(
            execute_grasp(&scene, &bad, &GripperGeometry::default(), &SimConfig::default(), 0),
            Err(Error::Logic(_))
        ));
    }

    #[test]
    fn compute_z_examples() {
        use crate::heightmap::Heightmap;
        let grip = GripperGeometry::default();
        let cfg = SimConfig::default();
        let res = 0.0034375;
        let mut hm = Heightmap::new(32, 32, res, [-16.0 * res; 2], 0.0).unwrap();
        let w = Window::from_image(&hm, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(compute_z(&w, &grip, 1, &cfg).unwrap(), 0.0);
        for r in 12..20 {
            for c in 12..20 {
                hm.set(r, c, 0.05);
            }
        }
        let w = Window::from_image(&hm, 0.0, 0.0, 0.0).unwrap();
        assert!((compute_z(&w, &grip, 1, &cfg).unwrap() - 0.035).abs() < 1e-7);
        hm.set(22, 16, 0.08);
        let w = Window::from_image(&hm, 0.0, 0.0, 0.0).unwrap();
        assert!((compute_z(&w, &grip, 1, &cfg).unwrap() - 0.065).abs() < 1e-7);
        hm.set_unknown(15, 16);
        let w = Window::from_image(&hm, 0.0, 0.0, 0.0).unwrap();
        assert!(matches!(compute_z(&w, &grip, 1, &cfg), Err(Error::Rejected(_))));
    }
}
