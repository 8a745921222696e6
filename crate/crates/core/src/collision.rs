//! Gripper geometry, the analytic collision-free tilt interval, a brute-force
//! sweep oracle for it, and the full 3-D approach check used for rejection
//! sampling.
//!
//! In the tilt plane the gripper body is a rectangle of half-width `w` spanning
//! `[d_l, d_u]` along the approach axis, which points at angle `alpha` from the
//! +r axis (planar approach is `alpha = pi/2`). Each profile sample `(r, h)`
//! stands for a solid column `{x = r, z <= h}`; the half-plane below the grasp
//! point is solid as well.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grasp_sim::GraspAction;
use crate::heightmap::Heightmap;
use crate::imaging::Window;
use crate::scene::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GripperGeometry {
    /// Half-thickness of the body across the closing axis.
    pub r_g: f64,
    /// Finger length: distance from fingertips to the body.
    pub d_l: f64,
    /// Distance from fingertips to the top of the body.
    pub d_u: f64,
    pub finger_width: f64,
    /// Pre-shape widths, one per primitive, ascending.
    pub strokes: Vec<f64>,
    pub max_stroke: f64,
}

impl Default for GripperGeometry {
    fn default() -> Self {
        Self {
            r_g: 0.035,
            d_l: 0.05,
            d_u: 0.12,
            finger_width: 0.012,
            strokes: vec![0.025, 0.05, 0.07, 0.086],
            max_stroke: 0.086,
        }
    }
}

impl GripperGeometry {
    /// Same hand with short fingers.
    pub fn short() -> Self {
        Self { d_l: 0.025, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let ok = pos(self.r_g)
            && pos(self.d_l)
            && pos(self.finger_width)
            && self.d_u.is_finite()
            && self.d_l < self.d_u
            && !self.strokes.is_empty()
            && self.strokes.iter().all(|&s| pos(s) && s <= self.max_stroke)
            && self.strokes.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid gripper geometry {self:?}")))
        }
    }

    pub fn n_primitives(&self) -> usize {
        self.strokes.len()
    }

    pub fn stroke(&self, m: usize) -> Result<f64> {
        self.strokes
            .get(m)
            .copied()
            .ok_or_else(|| Error::Argument(format!("primitive {m} out of range (have {})", self.strokes.len())))
    }

    /// Half-extent of the body along the closing axis.
    pub fn body_half_span(&self) -> f64 {
        self.max_stroke / 2.0 + self.finger_width
    }

    /// Tilt-plane rectangle for one axis.
    pub fn rect(&self, axis: Axis) -> Rect {
        let half_width = match axis {
            Axis::B => self.r_g,
            Axis::C => self.body_half_span(),
        };
        Rect { half_width, lower: self.d_l, upper: self.d_u }
    }
}

/// Tilt axis. `B` tilts the approach toward +x of the window, `C` toward +y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    B,
    C,
}

/// Maximum-height profile along one window axis, heights relative to the grasp point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub axis: Axis,
    /// `(r, h)` pairs with strictly increasing `r`.
    pub samples: Vec<[f64; 2]>,
}

impl Profile {
    pub fn new(axis: Axis, samples: Vec<[f64; 2]>) -> Result<Self> {
        if samples.iter().any(|s| !s[0].is_finite() || !s[1].is_finite()) {
            return Err(Error::Argument("profile samples must be finite".into()));
        }
        if samples.windows(2).any(|w| w[0][0] >= w[1][0]) {
            return Err(Error::Argument("profile distances must be strictly increasing".into()));
        }
        Ok(Self { axis, samples })
    }

    /// Reflect about the grasp point.
    pub fn mirrored(&self) -> Self {
        Self { axis: self.axis, samples: self.samples.iter().rev().map(|&[r, h]| [-r, h]).collect() }
    }
}

/// Per-row or per-column maximum of the window relative to `grasp_z`. Only
/// cells across from the body are used, and cells between the pre-shaped
/// jaws directly under the body are skipped since the jaws straddle them.
pub fn axis_profile(w: &Window, axis: Axis, grip: &GripperGeometry, stroke: f64, grasp_z: f64) -> Result<Profile> {
    build_profile(w, axis, grip, stroke, grasp_z, None)
}

/// Like [`axis_profile`], with the body already tilted by `other_tilt` about
/// the other axis: only cells that tilted body still reaches are kept.
pub fn axis_profile_tilted(
    w: &Window,
    axis: Axis,
    grip: &GripperGeometry,
    stroke: f64,
    grasp_z: f64,
    other_tilt: f64,
) -> Result<Profile> {
    build_profile(w, axis, grip, stroke, grasp_z, Some(other_tilt))
}

fn build_profile(
    w: &Window,
    axis: Axis,
    grip: &GripperGeometry,
    stroke: f64,
    grasp_z: f64,
    other_tilt: Option<f64>,
) -> Result<Profile> {
    let n = w.size();
    let res = w.resolution();
    let other = match axis {
        Axis::B => Axis::C,
        Axis::C => Axis::B,
    };
    let across = grip.rect(other).half_width + res;
    let other_rect = grip.rect(other);
    let jaw = [grip.r_g, stroke / 2.0];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<f64> = None;
        for j in 0..n {
            let (row, col) = match axis {
                Axis::B => (j, i),
                Axis::C => (i, j),
            };
            let [u, v] = w.offset(row, col);
            let cross = if axis == Axis::B { v } else { u };
            if cross.abs() > across || (u.abs() <= jaw[0] && v.abs() <= jaw[1]) {
                continue;
            }
            if let Some(h) = w.image.get(row, col) {
                if other_tilt.is_some_and(|t| !other_rect.hits_column(FRAC_PI_2 - t, cross, h as f64 - grasp_z)) {
                    continue;
                }
                best = Some(best.map_or(h as f64, |b: f64| b.max(h as f64)));
            }
        }
        if let Some(h) = best {
            let [u, v] = w.offset(i, i);
            let r = if axis == Axis::B { u } else { v };
            samples.push([r, h - grasp_z]);
        }
    }
    if samples.is_empty() {
        if other_tilt.is_none() {
            return Err(Error::Collision("profile has no known cells".into()));
        }
        // nothing left in reach: only the floor below the grasp point limits the tilt
        samples.push([0.0, -(grip.d_u + 1.0)]);
    }
    Profile::new(axis, samples)
}

/// Body rectangle in a tilt plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Rect {
    /// Corners as `(t, s)` in the rectangle frame.
    fn local_corners(&self) -> [[f64; 2]; 4] {
        let w = self.half_width;
        [[self.lower, -w], [self.lower, w], [self.upper, w], [self.upper, -w]]
    }

    /// Corners in the plane at approach angle `alpha`, in polygon order.
    pub fn corners(&self, alpha: f64) -> [[f64; 2]; 4] {
        let (sa, ca) = alpha.sin_cos();
        self.local_corners().map(|[t, s]| [t * ca + s * sa, t * sa - s * ca])
    }

    /// Whether the rectangle at `alpha` meets the column `{x = r, z <= h}`.
    pub fn hits_column(&self, alpha: f64, r: f64, h: f64) -> bool {
        let v = self.corners(alpha);
        let mut zmin = f64::INFINITY;
        for k in 0..4 {
            let (a, b) = (v[k], v[(k + 1) % 4]);
            if (a[0] - r) * (b[0] - r) > 0.0 {
                continue;
            }
            if a[0] == b[0] {
                zmin = zmin.min(a[1]).min(b[1]);
            } else {
                let f = (r - a[0]) / (b[0] - a[0]);
                zmin = zmin.min(a[1] + f * (b[1] - a[1]));
            }
        }
        zmin <= h
    }

    /// Whether any corner dips below the grasp point.
    pub fn hits_ground(&self, alpha: f64) -> bool {
        self.corners(alpha).iter().any(|c| c[1] < 0.0)
    }

    /// Smallest approach angle clear of the solid half-plane below the grasp point.
    pub fn ground_bound(&self) -> f64 {
        (self.half_width / self.lower).atan()
    }

    /// Angles in `(0, pi)` where the rectangle boundary touches the column.
    fn contact_events(&self, r: f64, h: f64, out: &mut Vec<f64>) {
        let rho = r.hypot(h);
        let phi = h.atan2(r);
        let mut push = |a: f64| {
            let a = wrap(a);
            if a > 0.0 && a < PI {
                out.push(a);
            }
        };
        if rho > 0.0 {
            for d in [self.lower, self.upper] {
                if d <= rho {
                    let k = (d / rho).acos();
                    push(phi + k);
                    push(phi - k);
                }
            }
            for s in [-self.half_width, self.half_width] {
                if s.abs() <= rho {
                    let k = (s / rho).asin();
                    push(phi + k);
                    push(phi + PI - k);
                }
            }
        }
        for [t, s] in self.local_corners() {
            let big_r = t.hypot(s);
            if r.abs() <= big_r {
                let delta = s.atan2(t);
                let k = (r / big_r).acos();
                push(delta + k);
                push(delta - k);
            }
        }
    }

    /// Supremum of approach angles in `(0, pi)` at which the column is hit,
    /// ignoring isolated grazing contacts.
    pub fn column_sup(&self, r: f64, h: f64) -> Option<f64> {
        let mut ev = vec![0.0, PI];
        self.contact_events(r, h, &mut ev);
        ev.sort_by(f64::total_cmp);
        ev.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        ev.windows(2)
            .rev()
            .find(|w| w[1] - w[0] > 1e-12 && self.hits_column(0.5 * (w[0] + w[1]), r, h))
            .map(|w| w[1])
    }
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// True iff the body rectangle at approach angle `alpha` meets any column of
/// the profile or dips below the grasp point.
pub fn sweep_collision_oracle(p: &Profile, grip: &GripperGeometry, alpha: f64) -> bool {
    let rect = grip.rect(p.axis);
    rect.hits_ground(alpha) || p.samples.iter().any(|&[r, h]| rect.hits_column(alpha, r, h))
}

/// Collision-free approach angles `(alpha_min, alpha_max)` in one tilt plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeInterval {
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl FreeInterval {
    /// Admissible tilt angles `[lo, hi]`; positive tilt leans toward +r.
    pub fn tilt_bounds(&self) -> (f64, f64) {
        (FRAC_PI_2 - self.alpha_max, FRAC_PI_2 - self.alpha_min)
    }
}

fn lower_bound(rect: &Rect, samples: &[[f64; 2]]) -> f64 {
    samples
        .iter()
        .filter(|s| s[0] >= 0.0)
        .filter_map(|&[r, h]| rect.column_sup(r, h))
        .fold(rect.ground_bound(), f64::max)
}

/// Analytic free interval. The upper bound is the lower bound of the mirrored
/// profile reflected back. Fails when the two bounds cross.
pub fn free_interval(p: &Profile, grip: &GripperGeometry) -> Result<FreeInterval> {
    if p.samples.is_empty() {
        return Err(Error::Argument("profile is empty".into()));
    }
    let rect = grip.rect(p.axis);
    let alpha_min = lower_bound(&rect, &p.samples);
    let alpha_max = PI - lower_bound(&rect, &p.mirrored().samples);
    if alpha_min > alpha_max {
        return Err(Error::EmptyInterval { alpha_min, alpha_max });
    }
    Ok(FreeInterval { alpha_min, alpha_max })
}

/// Box in the tool frame, open toward +z (the approach sweeps it in from above).
#[derive(Debug, Clone, Copy)]
struct SweptBox {
    center: Vec3,
    half: Vec3,
}

fn gripper_boxes(grip: &GripperGeometry, stroke: f64) -> [SweptBox; 3] {
    let fw = grip.finger_width;
    let y = stroke / 2.0 + fw / 2.0;
    let finger = |y: f64| SweptBox {
        center: Vec3::new(0.0, y, grip.d_l / 2.0),
        half: Vec3::new(fw / 2.0, fw / 2.0, grip.d_l / 2.0),
    };
    let body = SweptBox {
        center: Vec3::new(0.0, 0.0, (grip.d_l + grip.d_u) / 2.0),
        half: Vec3::new(grip.r_g, grip.body_half_span(), (grip.d_u - grip.d_l) / 2.0),
    };
    [finger(-y), finger(y), body]
}

/// True when approaching `action` along the tool axis drives any part of the
/// pre-shaped gripper into the heightmap surface, or when the pose is out of
/// range. Unknown cells are treated as empty.
pub fn check_grasp_collision(hm: &Heightmap, action: &GraspAction, grip: &GripperGeometry) -> bool {
    let Ok(stroke) = grip.stroke(action.m) else { return true };
    if !hm.contains(action.x, action.y) || !(action.z >= 0.0) || !action.is_finite() {
        return true;
    }
    let rot = action.rotation();
    let inv = rot.inverse();
    let origin = Vec3::new(action.x, action.y, action.z);
    let up = inv * Vec3::z();
    let grow = hm.resolution() * std::f64::consts::FRAC_1_SQRT_2;
    let boxes = gripper_boxes(grip, stroke);
    let top = hm.max_height() as f64;
    // cells outside the swept footprint cannot touch; bound it generously
    let reach = grip.d_u + grip.body_half_span() + (top - action.z).max(0.0) + grow;
    let (c0, r0) = hm.to_pixel(action.x - reach, action.y - reach);
    let (c1, r1) = hm.to_pixel(action.x + reach, action.y + reach);
    let clamp = |v: f64, n: usize| v.floor().clamp(0.0, (n - 1) as f64) as usize;
    let (c0, c1) = (clamp(c0, hm.width()), clamp(c1 + 1.0, hm.width()));
    let (r0, r1) = (clamp(r0, hm.height()), clamp(r1 + 1.0, hm.height()));
    // A point sample can miss up to a pixel of a neighbour's edge (a wall
    // face falling inside a floor cell). The body must never touch, so it
    // sees the 3x3 maximum.
    let neighbourhood = |row: usize, col: usize| {
        let mut m = None::<f32>;
        for r in row.saturating_sub(1)..=(row + 1).min(hm.height() - 1) {
            for c in col.saturating_sub(1)..=(col + 1).min(hm.width() - 1) {
                if let Some(h) = hm.get(r, c) {
                    m = Some(m.map_or(h, |m| m.max(h)));
                }
            }
        }
        m
    };
    for row in r0..=r1 {
        for col in c0..=c1 {
            let [x, y] = hm.cell_center(row, col);
            let base = inv * (Vec3::new(x, y, 0.0) - origin);
            if let Some(h) = hm.get(row, col) {
                if boxes[..2].iter().any(|b| column_meets_box(&base, &up, h as f64, b, grow, false)) {
                    return true;
                }
            }
            if let Some(h) = neighbourhood(row, col) {
                if column_meets_box(&base, &up, h as f64, &boxes[2], grow, true) {
                    return true;
                }
            }
        }
    }
    false
}

/// Does the vertical column `base + z * up, z <= h` (tool frame) meet the box
/// swept upward along tool z? Lateral faces are grown by `grow`; the bottom
/// face too when `grow_bottom` is set.
fn column_meets_box(base: &Vec3, up: &Vec3, h: f64, b: &SweptBox, grow: f64, grow_bottom: bool) -> bool {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, h);
    let mut clip = |a: f64, k: f64, bound: f64| -> bool {
        // a + k z <= bound
        if k.abs() < 1e-12 {
            return a <= bound;
        }
        let z = (bound - a) / k;
        if k > 0.0 {
            hi = hi.min(z);
        } else {
            lo = lo.max(z);
        }
        lo <= hi
    };
    for i in 0..2 {
        let e = b.half[i] + grow;
        if !clip(base[i] - b.center[i], up[i], e) || !clip(b.center[i] - base[i], -up[i], e) {
            return false;
        }
    }
    let floor = b.center.z - b.half.z - if grow_bottom { grow } else { 0.0 };
    clip(floor - base.z, -up.z, 0.0) && lo <= hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grip() -> GripperGeometry {
        GripperGeometry { r_g: 0.02, d_l: 0.05, ..GripperGeometry::default() }
    }

    #[test]
    fn flat_profile_uses_ground_bound() {
        let p = Profile::new(Axis::B, (-10..=10).map(|i| [i as f64 * 0.004, -0.01]).collect()).unwrap();
        let fi = free_interval(&p, &grip()).unwrap();
        assert!((fi.alpha_min - 0.4f64.atan()).abs() < 1e-12);
        assert!((fi.alpha_max - (PI - 0.4f64.atan())).abs() < 1e-12);
        assert!(!sweep_collision_oracle(&p, &grip(), FRAC_PI_2));
    }

    #[test]
    fn obstacle_in_footprint_collides_at_planar() {
        let p = Profile::new(Axis::B, vec![[0.01, 0.08]]).unwrap();
        assert!(sweep_collision_oracle(&p, &grip(), FRAC_PI_2));
    }

    #[test]
    fn symmetric_obstacles_give_symmetric_interval() {
        let p = Profile::new(Axis::B, vec![[-0.04, 0.06], [0.04, 0.06]]).unwrap();
        let fi = free_interval(&p, &grip()).unwrap();
        assert!(((fi.alpha_max - FRAC_PI_2) - (FRAC_PI_2 - fi.alpha_min)).abs() < 1e-12);
    }

    #[test]
    fn column_beyond_upper_extent_still_limits_tilt() {
        // a tall column just past d_u is still reached by the upper outer corner
        let p = Profile::new(Axis::B, vec![[0.081, 0.1]]).unwrap();
        let g = GripperGeometry { r_g: 0.02, d_l: 0.05, d_u: 0.08, ..GripperGeometry::default() };
        let fi = free_interval(&p, &g).unwrap();
        assert!(fi.alpha_min > g.rect(Axis::B).ground_bound() + 0.04);
        assert!(!sweep_collision_oracle(&p, &g, fi.alpha_min + 1e-6));
        assert!(sweep_collision_oracle(&p, &g, fi.alpha_min - 1e-3));
    }

    #[test]
    fn wall_inside_body_forces_tilt_away() {
        let g = GripperGeometry::default();
        let p = Profile::new(Axis::B, vec![[0.03, 0.065], [0.04, 0.065]]).unwrap();
        assert!(sweep_collision_oracle(&p, &g, FRAC_PI_2));
        let fi = free_interval(&p, &g).unwrap();
        let (lo, hi) = fi.tilt_bounds();
        assert!(hi < 0.0 && lo < hi);
        assert!(!sweep_collision_oracle(&p, &g, FRAC_PI_2 - (hi - 0.01)));
    }

    #[test]
    fn crossing_bounds_are_empty() {
        let p = Profile::new(Axis::B, vec![[-0.01, 0.3], [0.01, 0.3]]).unwrap();
        assert!(matches!(free_interval(&p, &grip()), Err(Error::EmptyInterval { .. })));
    }

    fn profile_strategy() -> impl Strategy<Value = (Profile, GripperGeometry)> {
        (
            proptest::collection::vec((-0.06f64..0.06, -0.02f64..0.12), 1..12),
            0.01f64..0.05,
            0.02f64..0.07,
            0.02f64..0.1,
            any::<bool>(),
        )
            .prop_map(|(pts, r_g, d_l, extra, c_axis)| {
                let mut pts: Vec<[f64; 2]> = pts.into_iter().map(|(r, h)| [r, h]).collect();
                pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
                pts.dedup_by(|a, b| a[0] == b[0]);
                let g = GripperGeometry { r_g, d_l, d_u: d_l + extra, ..GripperGeometry::default() };
                (Profile::new(if c_axis { Axis::C } else { Axis::B }, pts).unwrap(), g)
            })
    }

    proptest! {
        #[test]
        fn interior_angles_are_free((p, g) in profile_strategy()) {
            if let Ok(fi) = free_interval(&p, &g) {
                let n = 200;
                for k in 1..n {
                    let a = fi.alpha_min + (fi.alpha_max - fi.alpha_min) * k as f64 / n as f64;
                    prop_assert!(!sweep_collision_oracle(&p, &g, a), "collides at {a}");
                }
            }
        }

        #[test]
        fn raising_a_sample_never_widens((p, g) in profile_strategy(), idx in 0usize..12, dh in 0.0f64..0.05) {
            let mut q = p.clone();
            let i = idx % q.samples.len();
            q.samples[i][1] += dh;
            if let (Ok(a), Ok(b)) = (free_interval(&p, &g), free_interval(&q, &g)) {
                prop_assert!(b.alpha_min >= a.alpha_min - 1e-12);
                prop_assert!(b.alpha_max <= a.alpha_max + 1e-12);
            } else if free_interval(&p, &g).is_err() {
                prop_assert!(free_interval(&q, &g).is_err());
            }
        }

        #[test]
        fn mirroring_swaps_bounds((p, g) in profile_strategy()) {
            match (free_interval(&p, &g), free_interval(&p.mirrored(), &g)) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.alpha_min - (PI - b.alpha_max)).abs() < 1e-12);
                    prop_assert!((a.alpha_max - (PI - b.alpha_min)).abs() < 1e-12);
                }
                (a, b) => prop_assert_eq!(a.is_ok(), b.is_ok()),
            }
        }
    }
}
