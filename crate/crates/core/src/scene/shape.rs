//! Primitive solids, their resting poses, and ray queries.

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Box { lx: f64, ly: f64, lz: f64 },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            Shape::Box { lx, ly, lz } => ok(lx) && ok(ly) && ok(lz),
            Shape::Cylinder { radius, height } => ok(radius) && ok(height),
            Shape::Sphere { radius } => ok(radius),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Box { .. } => "box",
            Shape::Cylinder { .. } => "cylinder",
            Shape::Sphere { .. } => "sphere",
        }
    }
}

/// How an object lies on its support before the yaw is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Rest {
    /// Body z axis vertical.
    Upright,
    /// Body z axis horizontal (a cylinder on its side).
    Lying,
    /// Rolled about the body x axis by `roll` radians (a leaning plank).
    Tilted { roll: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub rest: Rest,
    /// Height of the lowest point of the object.
    pub z_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidObject {
    pub object_id: u64,
    pub shape: Shape,
    pub pose: ObjectPose,
}

/// Ray hit: distance along the ray and outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
}

impl RigidObject {
    pub fn rotation(&self) -> Rotation3<f64> {
        let rest = match self.pose.rest {
            Rest::Upright => Rotation3::identity(),
            Rest::Lying => Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::FRAC_PI_2),
            Rest::Tilted { roll } => Rotation3::from_axis_angle(&Vec3::x_axis(), roll),
        };
        Rotation3::from_axis_angle(&Vec3::z_axis(), self.pose.yaw) * rest
    }

    /// Half extents of the world-axis-aligned bounding box.
    pub fn half_extents(&self) -> Vec3 {
        let r = self.rotation();
        let m = r.matrix();
        match self.shape {
            Shape::Box { lx, ly, lz } => {
                let h = Vec3::new(lx / 2.0, ly / 2.0, lz / 2.0);
                Vec3::from_fn(|i, _| (0..3).map(|k| m[(i, k)].abs() * h[k]).sum())
            }
            Shape::Cylinder { radius, height } => {
                let axis = m.column(2);
                Vec3::from_fn(|i, _| {
                    let a = axis[i].abs();
                    a * height / 2.0 + radius * (1.0 - a * a).max(0.0).sqrt()
                })
            }
            Shape::Sphere { radius } => Vec3::repeat(radius),
        }
    }

    /// Height of the object's bounding box.
    pub fn vertical_extent(&self) -> f64 {
        2.0 * self.half_extents().z
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.pose.x, self.pose.y, self.pose.z_base + self.half_extents().z)
    }

    pub fn top(&self) -> f64 {
        self.pose.z_base + self.vertical_extent()
    }

    /// XY bounding box `[x_min, y_min, x_max, y_max]`.
    pub fn footprint_bounds(&self) -> [f64; 4] {
        let h = self.half_extents();
        [self.pose.x - h.x, self.pose.y - h.y, self.pose.x + h.x, self.pose.y + h.y]
    }

    /// First intersection of a world ray with the solid, ignoring hits behind the origin.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let rot = self.rotation();
        let o = rot.inverse_transform_vector(&(origin - self.center()));
        let d = rot.inverse_transform_vector(dir);
        let hit = match self.shape {
            Shape::Box { lx, ly, lz } => ray_box(&o, &d, &Vec3::new(lx / 2.0, ly / 2.0, lz / 2.0)),
            Shape::Cylinder { radius, height } => ray_cylinder(&o, &d, radius, height / 2.0),
            Shape::Sphere { radius } => ray_sphere(&o, &d, radius),
        }?;
        Some(Hit { t: hit.t, normal: rot * hit.normal })
    }

    /// Highest surface point on the vertical line through `(x, y)`.
    pub fn top_at(&self, x: f64, y: f64) -> Option<f64> {
        let [x0, y0, x1, y1] = self.footprint_bounds();
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return None;
        }
        let start = self.top() + 1.0;
        let hit = self.ray_hit(&Vec3::new(x, y, start), &Vec3::new(0.0, 0.0, -1.0))?;
        Some(start - hit.t)
    }

    /// True when the world point lies inside the solid.
    pub fn contains(&self, p: &Vec3) -> bool {
        let rot = self.rotation();
        let q = rot.inverse_transform_vector(&(p - self.center()));
        match self.shape {
            Shape::Box { lx, ly, lz } => q.x.abs() <= lx / 2.0 && q.y.abs() <= ly / 2.0 && q.z.abs() <= lz / 2.0,
            Shape::Cylinder { radius, height } => q.z.abs() <= height / 2.0 && q.x * q.x + q.y * q.y <= radius * radius,
            Shape::Sphere { radius } => q.norm_squared() <= radius * radius,
        }
    }
}

fn ray_box(o: &Vec3, d: &Vec3, h: &Vec3) -> Option<Hit> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut near_sign = 0.0;
    let mut far_axis = 0;
    let mut far_sign = 0.0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > h[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[i];
        let mut t0 = (-h[i] - o[i]) * inv;
        let mut t1 = (h[i] - o[i]) * inv;
        // face normal sign for the entering / leaving plane
        let (mut s0, mut s1) = (-1.0, 1.0);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            std::mem::swap(&mut s0, &mut s1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = i;
            near_sign = s0;
        }
        if t1 < t_far {
            t_far = t1;
            far_axis = i;
            far_sign = s1;
        }
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        return None;
    }
    let (t, axis, sign) = if t_near >= 0.0 { (t_near, near_axis, near_sign) } else { (t_far, far_axis, far_sign) };
    let mut n = Vec3::zeros();
    n[axis] = sign;
    Some(Hit { t, normal: n })
}

fn ray_cylinder(o: &Vec3, d: &Vec3, r: f64, hh: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, n: Vec3| {
        if t >= 0.0 && best.map_or(true, |b| t < b.t) {
            best = Some(Hit { t, normal: n });
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = 2.0 * (o.x * d.x + o.y * d.y);
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = o.z + t * d.z;
                if z.abs() <= hh {
                    let p = o + d * t;
                    consider(t, Vec3::new(p.x, p.y, 0.0) / r);
                }
            }
        }
    }
    if d.z.abs() > 1e-15 {
        for (zc, nz) in [(hh, 1.0), (-hh, -1.0)] {
            let t = (zc - o.z) / d.z;
            let p = o + d * t;
            if p.x * p.x + p.y * p.y <= r * r {
                consider(t, Vec3::new(0.0, 0.0, nz));
            }
        }
    }
    best
}

fn ray_sphere(o: &Vec3, d: &Vec3, r: f64) -> Option<Hit> {
    let a = d.norm_squared();
    let b = 2.0 * o.dot(d);
    let c = o.norm_squared() - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    let t = if t0 >= 0.0 {
        t0
    } else if t1 >= 0.0 {
        t1
    } else {
        return None;
    };
    let p = o + d * t;
    Some(Hit { t, normal: p / r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn object(shape: Shape, rest: Rest) -> RigidObject {
        RigidObject { object_id: 0, shape, pose: ObjectPose { x: 0.0, y: 0.0, yaw: 0.3, rest, z_base: 0.0 } }
    }

    #[test]
    fn upright_box_top_is_its_height() {
        let b = object(Shape::Box { lx: 0.04, ly: 0.03, lz: 0.05 }, Rest::Upright);
        assert!((b.top_at(0.0, 0.0).unwrap() - 0.05).abs() < 1e-12);
        assert!(b.top_at(0.05, 0.05).is_none());
    }

    #[test]
    fn sphere_apex_is_diameter() {
        let s = object(Shape::Sphere { radius: 0.03 }, Rest::Upright);
        assert!((s.top_at(0.0, 0.0).unwrap() - 0.06).abs() < 1e-12);
        let off = s.top_at(0.015, 0.0).unwrap();
        assert!((off - (0.03 + (0.03f64.powi(2) - 0.015f64.powi(2)).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn lying_cylinder_extent() {
        let c = object(Shape::Cylinder { radius: 0.02, height: 0.1 }, Rest::Lying);
        assert!((c.vertical_extent() - 0.04).abs() < 1e-12);
        assert!((c.top_at(0.0, 0.0).unwrap() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn tilted_box_rests_on_lowest_point() {
        let b = RigidObject {
            object_id: 0,
            shape: Shape::Box { lx: 0.05, ly: 0.02, lz: 0.02 },
            pose: ObjectPose { x: 0.0, y: 0.0, yaw: 0.0, rest: Rest::Tilted { roll: FRAC_PI_4 }, z_base: 0.0 },
        };
        let expected = 0.02 * std::f64::consts::SQRT_2;
        assert!((b.vertical_extent() - expected).abs() < 1e-12);
        assert!((b.top_at(0.0, 0.0).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn horizontal_ray_normal_on_box_face() {
        let b = object(Shape::Box { lx: 0.04, ly: 0.04, lz: 0.04 }, Rest::Upright);
        let b = RigidObject { pose: ObjectPose { yaw: 0.0, ..b.pose }, ..b };
        let hit = b.ray_hit(&Vec3::new(0.0, 0.1, 0.02), &Vec3::new(0.0, -1.0, 0.0)).unwrap();
        assert!((hit.t - 0.08).abs() < 1e-12);
        assert!((hit.normal - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }
}
