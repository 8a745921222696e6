//! Reward heatmaps: an 8-bit RGBA PNG where probability 0 is black and 1 is
//! white (pixels no grasp point lands on are transparent), and a 16-bit PGM
//! holding `round(p * 65535)` with 0 for those pixels.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use hybrid_grasp::heightmap::write_pgm16;
use hybrid_grasp::policy::RewardMap;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapInfo {
    pub png: String,
    pub pgm: String,
    pub width: usize,
    pub height: usize,
    pub max_probability: f32,
}

pub fn gray(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write `<path>` and `<path>.pgm` (extension replaced).
pub fn write_heatmap(path: &Path, map: &RewardMap) -> Result<HeatmapInfo, CliError> {
    let (w, h, cells) = map.max_projection();
    let mut rgba = Vec::with_capacity(w * h * 4);
    for c in &cells {
        match c {
            Some(p) => {
                let g = gray(*p);
                rgba.extend([g, g, g, 255]);
            }
            None => rgba.extend([0, 0, 0, 0]),
        }
    }
    let file = File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| CliError::Runtime(format!("png: {e}")))?;
    writer.write_image_data(&rgba).map_err(|e| CliError::Runtime(format!("png: {e}")))?;
    writer.finish().map_err(|e| CliError::Runtime(format!("png: {e}")))?;

    let pgm = path.with_extension("pgm");
    let counts: Vec<u16> = cells.iter().map(|c| c.map_or(0, |p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)).collect();
    write_pgm16(&pgm, w, h, &counts)?;
    Ok(HeatmapInfo {
        png: path.display().to_string(),
        pgm: pgm.display().to_string(),
        width: w,
        height: h,
        max_probability: cells.iter().flatten().copied().fold(0.0, f32::max),
    })
}
