//! Analytic controller for the two lateral angles. `b` follows the weighted
//! mean slope along the window x axis; `c` balances the flank slopes seen by
//! the two jaws against the mean slope along y. Both are clipped to the
//! collision-free interval and the configured tilt limit.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::collision::{axis_profile, axis_profile_tilted, free_interval, Axis, GripperGeometry};
use crate::error::{Error, Result};
use crate::imaging::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Weight of the jaw-facing flank against the mean slope when one side is undercut.
    pub rho: f64,
    /// Standard deviation of the Gaussian weight along x, meters.
    pub sigma_w: f64,
    pub max_lateral: f64,
    /// Finite-difference spacing in pixels.
    pub quadrature_step: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { rho: 0.5, sigma_w: 1.5 * 0.012, max_lateral: 0.5, quadrature_step: 1 }
    }
}

impl ControllerConfig {
    pub fn for_gripper(grip: &GripperGeometry) -> Self {
        Self { sigma_w: 1.5 * grip.finger_width, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rho >= 0.0
            && self.sigma_w > 0.0
            && self.max_lateral > 0.0
            && self.max_lateral <= FRAC_PI_2
            && self.quadrature_step >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid controller config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateralAngles {
    pub b: f64,
    pub c: f64,
    pub beta_raw: f64,
    pub gamma_raw: f64,
    pub clipped_b: bool,
    pub clipped_c: bool,
}

/// Finite-difference slope field along one axis: central where both
/// neighbors are known, one-sided at the edge of the known region.
fn slope(w: &Window, along_x: bool, step: usize) -> Vec<Option<f64>> {
    let n = w.size();
    let h = step as f64 * w.resolution();
    let at = |r: usize, c: usize, d: isize| -> Option<f64> {
        let (r, c) = if along_x { (r as isize, c as isize + d) } else { (r as isize + d, c as isize) };
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            return None;
        }
        w.image.get(r as usize, c as usize).map(f64::from)
    };
    let s = step as isize;
    let mut out = vec![None; n * n];
    for r in 0..n {
        for c in 0..n {
            let Some(mid) = at(r, c, 0) else { continue };
            out[r * n + c] = match (at(r, c, -s), at(r, c, s)) {
                (Some(lo), Some(hi)) => Some((hi - lo) / (2.0 * h)),
                (None, Some(hi)) => Some((hi - mid) / h),
                (Some(lo), None) => Some((mid - lo) / h),
                (None, None) => None,
            };
        }
    }
    out
}

/// Offset of cell `i` from the middle of `n` cells, in cells; exactly antisymmetric.
fn centered(n: usize, i: usize) -> f64 {
    i as f64 - (n as f64 - 1.0) / 2.0
}

/// Sum over the grid, grouped in mirror-symmetric quadruples so that
/// reflecting the input reflects the result bit for bit.
fn symmetric_sum(n: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let half = n / 2;
    let mut total = 0.0;
    for r in 0..half {
        let rr = n - 1 - r;
        for c in 0..half {
            let cc = n - 1 - c;
            total += (f(r, c) + f(r, cc)) + (f(rr, c) + f(rr, cc));
        }
    }
    if n % 2 == 1 {
        let m = half;
        for k in 0..half {
            total += (f(m, k) + f(m, n - 1 - k)) + (f(k, m) + f(n - 1 - k, m));
        }
        total += f(m, m);
    }
    total
}

/// Row sum grouped symmetrically about the middle column.
fn symmetric_row_sum(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for c in 0..n / 2 {
        total += f(c) + f(n - 1 - c);
    }
    if n % 2 == 1 {
        total += f(n / 2);
    }
    total
}

/// Tilt about the window y axis that follows the local surface normal:
/// `tan(beta) = -E_w[ds/dx]` with a Gaussian weight in x normalized to unit mean.
pub fn angle_b(w: &Window, cfg: &ControllerConfig) -> Result<f64> {
    let n = w.size();
    let gx = slope(w, true, cfg.quadrature_step);
    let weight = |c: usize| {
        let u = centered(n, c) * w.resolution() / cfg.sigma_w;
        (-0.5 * u * u).exp()
    };
    let num = symmetric_sum(n, |r, c| gx[r * n + c].map_or(0.0, |g| weight(c) * g));
    let den = symmetric_sum(n, |r, c| if gx[r * n + c].is_some() { weight(c) } else { 0.0 });
    if den <= 0.0 {
        return Err(Error::Controller("no known cells for the x slope".into()));
    }
    Ok((-num / den).atan())
}

/// Flank angles `(gamma_l, gamma_r)` and mean-slope angle `gamma_m` for a
/// primitive of pre-shape width `stroke`. The flank angles use the extreme
/// x-averaged y slopes over the strip between the pre-shaped jaws.
pub fn side_gradients(w: &Window, stroke: f64, finger_width: f64, cfg: &ControllerConfig) -> Result<(f64, f64, f64)> {
    let n = w.size();
    let gy = slope(w, false, cfg.quadrature_step);
    let known = |r: usize, c: usize| gy[r * n + c].is_some();

    let sum = symmetric_sum(n, |r, c| gy[r * n + c].unwrap_or(0.0));
    let count = symmetric_sum(n, |r, c| known(r, c) as u8 as f64);
    if count == 0.0 {
        return Err(Error::Controller("no known cells for the y slope".into()));
    }
    let gamma_m = (-sum / count).atan();

    let strip = stroke / 2.0 + finger_width;
    let (mut g_max, mut g_min) = (f64::NEG_INFINITY, f64::INFINITY);
    for r in 0..n {
        if (centered(n, r) * w.resolution()).abs() > strip {
            continue;
        }
        let k = symmetric_row_sum(n, |c| known(r, c) as u8 as f64);
        if k == 0.0 {
            continue;
        }
        let g = symmetric_row_sum(n, |c| gy[r * n + c].unwrap_or(0.0)) / k;
        g_max = g_max.max(g);
        g_min = g_min.min(g);
    }
    if !g_max.is_finite() {
        return Err(Error::Controller("jaw strip has no known cells".into()));
    }
    // `+ 0.0` folds a negative zero so a level strip sits on the regular branch
    let gamma_l = (g_max + 0.0).atan2(-1.0) - FRAC_PI_2;
    let gamma_r = FRAC_PI_2 - (0.0 - g_min).atan2(-1.0);
    Ok((gamma_l, gamma_r, gamma_m))
}

/// Blend the flank and mean-slope angles. An undercut flank
/// (`gamma_l <= -pi/2` or `gamma_r >= pi/2`) is dropped in favor of the other
/// flank weighted by `rho`.
pub fn combine_gamma(gamma_l: f64, gamma_r: f64, gamma_m: f64, rho: f64) -> f64 {
    let left_under = gamma_l <= -FRAC_PI_2;
    let right_under = gamma_r >= FRAC_PI_2;
    match (left_under, right_under) {
        (false, false) => 0.5 * (gamma_l + gamma_r) + gamma_m,
        (false, true) => (rho * gamma_l + gamma_m) / (1.0 + rho),
        (true, false) => (rho * gamma_r + gamma_m) / (1.0 + rho),
        (true, true) => gamma_m,
    }
}

/// Lateral angles for a window cut at the grasp pose, with fingertips at
/// absolute height `grasp_z`.
pub fn lateral_control(
    w: &Window,
    m: usize,
    grip: &GripperGeometry,
    cfg: &ControllerConfig,
    grasp_z: f64,
) -> Result<LateralAngles> {
    let stroke = grip.stroke(m)?;
    let beta = angle_b(w, cfg)?;
    let (gl, gr, gm) = side_gradients(w, stroke, grip.finger_width, cfg)?;
    let gamma = combine_gamma(gl, gr, gm, cfg.rho);

    let bounds = |axis: Axis, other_tilt: Option<f64>| -> Result<(f64, f64)> {
        let profile = match other_tilt {
            None => axis_profile(w, axis, grip, stroke, grasp_z)?,
            Some(t) => axis_profile_tilted(w, axis, grip, stroke, grasp_z, t)?,
        };
        let (lo, hi) = free_interval(&profile, grip)?.tilt_bounds();
        let (lo, hi) = (lo.max(-cfg.max_lateral), hi.min(cfg.max_lateral));
        if lo > hi {
            return Err(Error::EmptyInterval { alpha_min: FRAC_PI_2 - hi, alpha_max: FRAC_PI_2 - lo });
        }
        Ok((lo, hi))
    };
    let clip = |raw: f64, (lo, hi): (f64, f64)| {
        let v = raw.clamp(lo, hi);
        (v, v != raw)
    };
    // An obstacle beside the body shows up in both planes. When one plane has
    // no room, settle the other first and keep only what its tilt still meets.
    let ((b, clipped_b), (c, clipped_c)) = match (bounds(Axis::B, None), bounds(Axis::C, None)) {
        (Ok(ib), Ok(ic)) => (clip(beta, ib), clip(gamma, ic)),
        (Err(Error::EmptyInterval { .. }), Ok(ic)) => {
            let c = clip(gamma, ic);
            (clip(beta, bounds(Axis::B, Some(c.0))?), c)
        }
        (Ok(ib), Err(Error::EmptyInterval { .. })) => {
            let b = clip(beta, ib);
            (b, clip(gamma, bounds(Axis::C, Some(b.0))?))
        }
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    if !(b.is_finite() && c.is_finite()) {
        return Err(Error::Controller("non-finite lateral angle".into()));
    }
    Ok(LateralAngles { b, c, beta_raw: beta, gamma_raw: gamma, clipped_b, clipped_c })
}
