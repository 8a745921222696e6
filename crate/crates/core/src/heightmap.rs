//! Orthographic heightmaps and their on-disk form.
//!
//! Cell `(row, col)` has its center at
//! `(origin.x + (col + 0.5) * res, origin.y + (row + 0.5) * res)`. Rows grow
//! along +y, columns along +x. Heights are meters above the bin floor.
//!
//! Files are a 16-bit binary PGM (big-endian, 0.1 mm per count, row-major,
//! origin top-left) plus a JSON sidecar. Unknown cells are written as 0 and
//! listed in an 8-bit mask PGM referenced from the sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Stored value of masked cells. Never read as a height.
pub const UNKNOWN: f32 = -1.0;

/// Meters per PGM count.
pub const PGM_UNIT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Heightmap {
    width: usize,
    height: usize,
    resolution: f64,
    origin: [f64; 2],
    wall_height: f64,
    values: Vec<f32>,
    mask: Vec<bool>,
}

impl Heightmap {
    /// A fully known map filled with `fill`.
    pub fn new(width: usize, height: usize, resolution: f64, origin: [f64; 2], fill: f32) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return arg(format!("resolution must be positive, got {resolution}"));
        }
        if width == 0 || height == 0 {
            return arg("heightmap must have at least one cell");
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            wall_height: 0.0,
            values: vec![fill; width * height],
            mask: vec![false; width * height],
        })
    }

    /// A map with every cell unknown.
    pub fn unknown(width: usize, height: usize, resolution: f64, origin: [f64; 2]) -> Result<Self> {
        let mut hm = Self::new(width, height, resolution, origin, UNKNOWN)?;
        hm.mask.iter_mut().for_each(|m| *m = true);
        Ok(hm)
    }

    /// Build from raw row-major parts. Masked values are normalized to the sentinel.
    pub fn from_parts(
        width: usize,
        height: usize,
        resolution: f64,
        origin: [f64; 2],
        mut values: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != width * height || mask.len() != width * height {
            return arg("value/mask length does not match dimensions");
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m {
                *v = UNKNOWN;
            } else if !v.is_finite() || *v < 0.0 {
                return arg(format!("known heights must be finite and non-negative, got {v}"));
            }
        }
        let mut hm = Self::new(width, height, resolution, origin, 0.0)?;
        hm.values = values;
        hm.mask = mask;
        Ok(hm)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn wall_height(&self) -> f64 {
        self.wall_height
    }

    pub fn set_wall_height(&mut self, h: f64) {
        self.wall_height = h;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Height at a cell, `None` if unknown.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        let i = self.index(row, col);
        (!self.mask[i]).then(|| self.values[i])
    }

    #[inline]
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, h: f32) {
        let i = self.index(row, col);
        self.values[i] = h;
        self.mask[i] = false;
    }

    pub fn set_unknown(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.values[i] = UNKNOWN;
        self.mask[i] = true;
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
        ]
    }

    /// Continuous pixel coordinates `(col, row)` of a world point; integer values are cell centers.
    #[inline]
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin[0]) / self.resolution - 0.5,
            (y - self.origin[1]) / self.resolution - 0.5,
        )
    }

    /// Cell containing a world point, if inside the map.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin[0]) / self.resolution).floor();
        let r = ((y - self.origin[1]) / self.resolution).floor();
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    /// World extent `[x_min, y_min, x_max, y_max]`.
    pub fn extent(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.width as f64 * self.resolution,
            self.origin[1] + self.height as f64 * self.resolution,
        ]
    }

    /// Bilinear sample at continuous pixel coordinates. `None` when any of the
    /// four neighbors is outside the map or masked.
    #[inline]
    pub fn sample_pixel(&self, col: f64, row: f64) -> Option<f64> {
        let c0 = col.floor();
        let r0 = row.floor();
        if c0 < 0.0 || r0 < 0.0 {
            return None;
        }
        let (c0i, r0i) = (c0 as usize, r0 as usize);
        let fc = col - c0;
        let fr = row - r0;
        // exact hits on the last row/column do not need the far neighbor
        let c1i = if fc == 0.0 { c0i } else { c0i + 1 };
        let r1i = if fr == 0.0 { r0i } else { r0i + 1 };
        if c1i >= self.width || r1i >= self.height {
            return None;
        }
        let i00 = r0i * self.width + c0i;
        let i01 = r0i * self.width + c1i;
        let i10 = r1i * self.width + c0i;
        let i11 = r1i * self.width + c1i;
        if self.mask[i00] || self.mask[i01] || self.mask[i10] || self.mask[i11] {
            return None;
        }
        let v00 = self.values[i00] as f64;
        let v01 = self.values[i01] as f64;
        let v10 = self.values[i10] as f64;
        let v11 = self.values[i11] as f64;
        let top = v00 + (v01 - v00) * fc;
        let bottom = v10 + (v11 - v10) * fc;
        Some(top + (bottom - top) * fr)
    }

    /// Bilinear sample at a world point.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (c, r) = self.to_pixel(x, y);
        self.sample_pixel(c, r)
    }

    /// Nearest-cell height at a world point; unknown and outside cells read as `None`.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f32> {
        let (r, c) = self.cell_of(x, y)?;
        self.get(r, c)
    }

    /// Maximum known height, 0 for an all-unknown map.
    pub fn max_height(&self) -> f32 {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .fold(0.0, f32::max)
    }

    /// Round every known height to the PGM grid.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for (v, &m) in out.values.iter_mut().zip(&out.mask) {
            if !m {
                *v = quantize(*v);
            }
        }
        out
    }

    /// Translate the content by whole cells, filling vacated cells with `fill`.
    pub fn shifted(&self, d_row: isize, d_col: isize, fill: f32) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let sr = r as isize - d_row;
                let sc = c as isize - d_col;
                let i = out.index(r, c);
                if sr >= 0 && sc >= 0 && (sr as usize) < self.height && (sc as usize) < self.width {
                    let j = self.index(sr as usize, sc as usize);
                    out.values[i] = self.values[j];
                    out.mask[i] = self.mask[j];
                } else {
                    out.values[i] = fill;
                    out.mask[i] = false;
                }
            }
        }
        out
    }

    /// PGM counts for every cell, 0 for unknown.
    pub fn to_counts(&self) -> Vec<u16> {
        self.values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { 0 } else { to_count(v) })
            .collect()
    }

    /// Write `<stem>.pgm`, `<stem>.json` and, when any cell is unknown, `<stem>.mask.pgm`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let pgm = stem.with_extension("pgm");
        write_pgm16(&pgm, self.width, self.height, &self.to_counts())?;
        let mask_file = if self.mask.iter().any(|&m| m) {
            let path = with_suffix(stem, ".mask.pgm");
            let bytes: Vec<u8> = self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
            write_pgm8(&path, self.width, self.height, &bytes)?;
            path.file_name().map(|n| n.to_string_lossy().into_owned())
        } else {
            None
        };
        let sidecar = Sidecar {
            resolution_m_per_px: self.resolution,
            origin_xy_m: self.origin,
            wall_height_m: self.wall_height,
            mask_file,
        };
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Load a heightmap written by [`Heightmap::save`].
    pub fn load(stem: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let (w, h, counts) = read_pgm16(&stem.with_extension("pgm"))?;
        let mask = match &sidecar.mask_file {
            Some(name) => {
                let dir = stem.parent().unwrap_or_else(|| Path::new("."));
                let (mw, mh, bytes) = read_pgm8(&dir.join(name))?;
                if mw != w || mh != h {
                    return Err(Error::Format("mask dimensions differ from heightmap".into()));
                }
                bytes.into_iter().map(|b| b != 0).collect()
            }
            None => vec![false; w * h],
        };
        let values = counts.iter().map(|&c| from_count(c)).collect();
        let mut hm = Self::from_parts(w, h, sidecar.resolution_m_per_px, sidecar.origin_xy_m, values, mask)?;
        hm.wall_height = sidecar.wall_height_m;
        Ok(hm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    resolution_m_per_px: f64,
    origin_xy_m: [f64; 2],
    wall_height_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_file: Option<String>,
}

#[inline]
pub fn to_count(h: f32) -> u16 {
    (h as f64 / PGM_UNIT).round().clamp(0.0, 65535.0) as u16
}

#[inline]
pub fn from_count(c: u16) -> f32 {
    (c as f64 * PGM_UNIT) as f32
}

#[inline]
pub fn quantize(h: f32) -> f32 {
    from_count(to_count(h))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_pgm16(path: &Path, w: usize, h: usize, counts: &[u16]) -> Result<()> {
    let mut out = Vec::with_capacity(20 + counts.len() * 2);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for c in counts {
        out.extend_from_slice(&c.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_pgm8(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(20 + bytes.len());
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

fn parse_pgm_header(data: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| Error::Format("bad PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected binary PGM (P5), found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s}")));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    // single whitespace byte separates header and raster
    Ok((w, h, maxval, pos + 1))
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let data = fs::read(path)?;
    let (w, h, maxval, start) = parse_pgm_header(&data)?;
    if maxval < 256 {
        return Err(Error::Format("expected a 16-bit PGM".into()));
    }
    let raster = data.get(start..start + 2 * w * h).ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    Ok((w, h, raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()))
}

pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path)?;
    let (w, h, maxval, start) = parse_pgm_header(&data)?;
    if maxval > 255 {
        return Err(Error::Format("expected an 8-bit PGM".into()));
    }
    let raster = data.get(start..start + w * h).ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    Ok((w, h, raster.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_resolution() {
        assert!(matches!(Heightmap::new(4, 4, 0.0, [0.0, 0.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(Heightmap::new(4, 4, -1.0, [0.0, 0.0], 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn bilinear_on_cell_centers_is_exact() {
        let mut hm = Heightmap::new(3, 3, 0.01, [0.0, 0.0], 0.0).unwrap();
        hm.set(1, 1, 0.5);
        assert_eq!(hm.sample_pixel(1.0, 1.0), Some(0.5));
        assert!((hm.sample_pixel(0.5, 1.0).unwrap() - 0.25).abs() < 1e-7);
        assert_eq!(hm.sample_pixel(2.0, 2.0), Some(0.0));
        assert_eq!(hm.sample_pixel(2.5, 2.0), None);
    }

    #[test]
    fn masked_neighbor_poisons_sample() {
        let mut hm = Heightmap::new(3, 3, 0.01, [0.0, 0.0], 0.1).unwrap();
        hm.set_unknown(1, 1);
        assert_eq!(hm.sample_pixel(0.5, 0.5), None);
        assert_eq!(hm.sample_pixel(0.0, 0.0), Some(0.1f32 as f64));
    }

    #[test]
    fn pgm_roundtrip_is_bit_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut hm = Heightmap::new(5, 4, 0.0034375, [-0.1, 0.2], 0.0).unwrap();
        hm.set(0, 0, 0.0123456);
        hm.set(3, 4, 0.0999);
        hm.set_unknown(2, 2);
        hm.set_wall_height(0.1);
        let hm = hm.quantized();
        let stem = dir.path().join("map");
        hm.save(&stem).unwrap();
        assert!(dir.path().join("map.mask.pgm").exists());
        let back = Heightmap::load(&stem).unwrap();
        assert_eq!(back, hm);
    }
}
