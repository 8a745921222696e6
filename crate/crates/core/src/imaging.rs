//! Rotated crops of heightmaps, the pre-rotated image stack used for dense
//! inference, and training-time augmentation.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{arg, Error, Result};
use crate::heightmap::Heightmap;
use crate::rng;

pub const DEFAULT_WINDOW: usize = 32;

/// Pixel coordinates this close to an integer are snapped onto it, so
/// axis-aligned crops copy cells exactly.
const SNAP: f64 = 1e-9;

/// A square crop in the grasp frame. `image` is expressed in window-local
/// coordinates: its origin sits at `(-d, -d)` so cell centers are offsets from
/// the grasp point, x along the jaw-normal direction, y along the closing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub image: Heightmap,
    pub x: f64,
    pub y: f64,
    pub a: f64,
}

impl Window {
    pub fn size(&self) -> usize {
        self.image.width()
    }

    pub fn resolution(&self) -> f64 {
        self.image.resolution()
    }

    /// Half side length, meters.
    pub fn half_extent(&self) -> f64 {
        self.size() as f64 * self.resolution() / 2.0
    }

    /// Window-local offset of a cell center from the grasp point.
    pub fn offset(&self, row: usize, col: usize) -> [f64; 2] {
        self.image.cell_center(row, col)
    }

    /// Wrap a square image as a window cut at the given pose.
    pub fn from_image(image: &Heightmap, x: f64, y: f64, a: f64) -> Result<Self> {
        if image.width() != image.height() {
            return arg("window must be square");
        }
        let d = image.width() as f64 * image.resolution() / 2.0;
        let mut img = Heightmap::from_parts(
            image.width(),
            image.height(),
            image.resolution(),
            [-d, -d],
            image.values().to_vec(),
            image.mask().to_vec(),
        )?;
        img.set_wall_height(image.wall_height());
        Ok(Self { image: img, x, y, a })
    }
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

#[inline]
fn sample_snapped(hm: &Heightmap, x: f64, y: f64) -> Option<f64> {
    let (c, r) = hm.to_pixel(x, y);
    hm.sample_pixel(snap(c), snap(r))
}

/// Cut a `size`-px window centered on `(x, y)` with its x axis along angle `a`.
/// Cells that fall outside the map or touch unknown cells are masked.
pub fn extract_window(hm: &Heightmap, x: f64, y: f64, a: f64, size: usize) -> Result<Window> {
    if size == 0 {
        return arg("window size must be positive");
    }
    if !hm.contains(x, y) || !a.is_finite() {
        return Err(Error::Range { x, y });
    }
    let res = hm.resolution();
    let d = size as f64 * res / 2.0;
    let mut img = Heightmap::unknown(size, size, res, [-d, -d])?;
    img.set_wall_height(hm.wall_height());
    let (s, c) = a.sin_cos();
    for r in 0..size {
        for col in 0..size {
            let [u, v] = img.cell_center(r, col);
            let wx = x + c * u - s * v;
            let wy = y + s * u + c * v;
            if let Some(h) = sample_snapped(hm, wx, wy) {
                img.set(r, col, h as f32);
            }
        }
    }
    Ok(Window { image: img, x, y, a })
}

/// Angle of image `k` in a stack of `n`.
pub fn stack_angle(k: usize, n: usize) -> f64 {
    -PI / 2.0 + k as f64 * PI / n as f64
}

/// One image of the rotation stack. It shares the source grid; its pixel at
/// image-frame point `p` shows the world at `center + R(angle) (p - center)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedImage {
    pub angle: f64,
    pub center: [f64; 2],
    pub image: Heightmap,
}

impl RotatedImage {
    /// World point shown at an image-frame point.
    pub fn to_world(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        [self.center[0] + c * dx - s * dy, self.center[1] + s * dx + c * dy]
    }

    /// Image-frame point showing a world point.
    pub fn from_world(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        [self.center[0] + c * dx + s * dy, self.center[1] - s * dx + c * dy]
    }
}

/// Resample `hm` rotated about its center by `angle`.
pub fn rotate_image(hm: &Heightmap, angle: f64) -> RotatedImage {
    let [x0, y0, x1, y1] = hm.extent();
    let center = [(x0 + x1) / 2.0, (y0 + y1) / 2.0];
    let mut img = hm.clone();
    let mut out = RotatedImage { angle, center, image: hm.clone() };
    for r in 0..hm.height() {
        for c in 0..hm.width() {
            let [px, py] = hm.cell_center(r, c);
            let [wx, wy] = out.to_world(px, py);
            match sample_snapped(hm, wx, wy) {
                Some(h) => img.set(r, c, h as f32),
                None => img.set_unknown(r, c),
            }
        }
    }
    out.image = img;
    out
}

/// Images rotated by `a_k = -pi/2 + k pi / n` for `k < n`, in order.
pub fn rotation_stack(hm: &Heightmap, n_rot: usize) -> Result<Vec<RotatedImage>> {
    if n_rot == 0 {
        return arg("rotation count must be at least 1");
    }
    Ok((0..n_rot).into_par_iter().map(|k| rotate_image(hm, stack_angle(k, n_rot))).collect())
}

/// Axis-aligned `size` crop whose top-left cell is `(row, col)`, as a window in
/// the frame of `img`. The crop center sits on the shared corner of its four
/// middle cells for even sizes.
pub fn crop(img: &RotatedImage, row: usize, col: usize, size: usize) -> Result<Window> {
    let hm = &img.image;
    if row + size > hm.height() || col + size > hm.width() {
        return arg("crop exceeds image bounds");
    }
    let res = hm.resolution();
    let d = size as f64 * res / 2.0;
    let mut out = Heightmap::unknown(size, size, res, [-d, -d])?;
    out.set_wall_height(hm.wall_height());
    for r in 0..size {
        for c in 0..size {
            if let Some(h) = hm.get(row + r, col + c) {
                out.set(r, c, h);
            }
        }
    }
    let o = hm.origin();
    let cx = o[0] + col as f64 * res + d;
    let cy = o[1] + row as f64 * res + d;
    let [x, y] = img.to_world(cx, cy);
    Ok(Window { image: out, x, y, a: img.angle })
}

/// Rotate a square image a quarter turn: output `(r, c)` takes input `(c, n-1-r)`.
pub fn rotate90(hm: &Heightmap) -> Heightmap {
    let n = hm.width();
    let mut out = hm.clone();
    for r in 0..n {
        for c in 0..n {
            match hm.get(c, n - 1 - r) {
                Some(h) => out.set(r, c, h),
                None => out.set_unknown(r, c),
            }
        }
    }
    out
}

/// Parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Meters.
    pub offset: f64,
    /// Fraction of cells turned unknown.
    pub noise: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self { scale: 1.0, offset: 0.0, noise: 0.0 };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            scale: rng.gen_range(0.95..1.05),
            offset: rng.gen_range(-0.005..0.005),
            noise: rng.gen_range(0.0..0.02),
        }
    }
}

/// Random height scale, height offset and dropout of cells. Deterministic per seed.
pub fn augment(w: &Window, seed: u64) -> Window {
    let mut rng = rng::stream(seed, &[rng::label::AUGMENT]);
    let p = AugmentParams::draw(&mut rng);
    augment_with(w, &p, &mut rng)
}

pub fn augment_with(w: &Window, p: &AugmentParams, rng: &mut impl Rng) -> Window {
    let mut out = w.clone();
    let n = out.size();
    for r in 0..n {
        for c in 0..n {
            if let Some(h) = w.image.get(r, c) {
                let v = (h as f64 * p.scale + p.offset).max(0.0);
                out.image.set(r, c, v as f32);
            }
        }
    }
    if p.noise > 0.0 {
        for r in 0..n {
            for c in 0..n {
                if rng.gen::<f64>() < p.noise {
                    out.image.set_unknown(r, c);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pattern(n: usize, res: f64) -> Heightmap {
        let mut hm = Heightmap::new(n, n, res, [-(n as f64) * res / 2.0; 2], 0.0).unwrap();
        for r in 0..n {
            for c in 0..n {
                let v = 0.001 * ((r * 7 + c * 3) % 17) as f32 + if r < n / 2 && c > n / 3 { 0.02 } else { 0.0 };
                hm.set(r, c, v);
            }
        }
        hm
    }

    #[test]
    fn axis_aligned_extract_copies_cells() {
        let hm = pattern(40, 0.01);
        // corner shared by cells (9,9),(9,10),(10,9),(10,10) → window starts at cell (4,4)
        let w = extract_window(&hm, -0.10, -0.10, 0.0, 12).unwrap();
        for r in 0..12 {
            for c in 0..12 {
                assert_eq!(w.image.get(r, c), hm.get(r + 4, c + 4));
            }
        }
    }

    #[test]
    fn quarter_turn_matches_image_rotation() {
        let hm = pattern(40, 0.01);
        let a0 = extract_window(&hm, 0.0, 0.0, 0.0, 16).unwrap();
        let a90 = extract_window(&hm, 0.0, 0.0, PI / 2.0, 16).unwrap();
        let rot = rotate90(&a0.image);
        for r in 0..16 {
            for c in 0..16 {
                let (x, y) = (a90.image.get(r, c).unwrap(), rot.get(r, c).unwrap());
                assert!((x - y).abs() <= 1e-6, "{r} {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn corner_window_masks_outside() {
        let hm = pattern(40, 0.01);
        let w = extract_window(&hm, -0.195, -0.195, 0.3, 16).unwrap();
        assert!(w.image.is_masked(0, 0));
        assert!(!w.image.is_masked(15, 15));
    }

    #[test]
    fn outside_pose_is_range_error() {
        let hm = pattern(10, 0.01);
        assert!(matches!(extract_window(&hm, 1.0, 0.0, 0.0, 4), Err(Error::Range { .. })));
    }

    #[test]
    fn angle_periodic() {
        let hm = pattern(40, 0.01);
        let a = extract_window(&hm, 0.013, -0.021, 0.7, 16).unwrap();
        let b = extract_window(&hm, 0.013, -0.021, 0.7 + 2.0 * PI, 16).unwrap();
        for (x, y) in a.image.values().iter().zip(b.image.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn stack_sizes_and_angles() {
        let hm = pattern(110, 0.0034375);
        let s = rotation_stack(&hm, 20).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.iter().all(|i| i.image.width() == 110 && i.image.height() == 110));
        assert!((s[0].angle + PI / 2.0).abs() < 1e-15);
        let one = rotation_stack(&hm, 1).unwrap();
        assert!((one[0].angle + PI / 2.0).abs() < 1e-15);
        assert!(rotation_stack(&hm, 0).is_err());
    }

    #[test]
    fn stack_crop_matches_direct_extract() {
        let hm = pattern(110, 0.0034375);
        let stack = rotation_stack(&hm, 20).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = rng.gen_range(0..20);
            let (i, j) = (rng.gen_range(0..79), rng.gen_range(0..79));
            let cw = crop(&stack[k], i, j, 32).unwrap();
            if !hm.contains(cw.x, cw.y) {
                continue;
            }
            let ew = extract_window(&hm, cw.x, cw.y, cw.a, 32).unwrap();
            for r in 0..32 {
                for c in 0..32 {
                    match (cw.image.get(r, c), ew.image.get(r, c)) {
                        (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-6),
                        (a, b) => assert_eq!(a.is_some(), b.is_some()),
                    }
                }
            }
        }
    }

    #[test]
    fn augment_deterministic_and_identity() {
        let hm = pattern(32, 0.0034375);
        let w = Window::from_image(&hm, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(augment(&w, 5), augment(&w, 5));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_with(&w, &AugmentParams::IDENTITY, &mut rng), w);
    }

    #[test]
    fn augment_keeps_masks() {
        let mut hm = pattern(32, 0.0034375);
        hm.set_unknown(3, 4);
        let w = Window::from_image(&hm, 0.0, 0.0, 0.0).unwrap();
        for seed in 0..50 {
            assert!(augment(&w, seed).image.is_masked(3, 4));
        }
    }
}
