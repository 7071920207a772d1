//! 8-bit false-color PNG previews. Display only; never fed back into metrics.

use std::path::Path;

use hipandas::HsiCube;
use image::{Rgb, RgbImage};

use crate::{CliError, CliResult};

/// Default display bands: last, middle, first (long to short wavelength).
pub fn default_bands(bands: usize) -> [usize; 3] {
    [bands - 1, bands / 2, 0]
}

/// 2nd and 98th percentiles (nearest rank) of one band.
pub fn percentile_range(values: &[f32]) -> (f32, f32) {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let at = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    (at(0.02), at(0.98))
}

fn stretch(v: f32, lo: f32, hi: f32) -> u8 {
    if hi <= lo {
        return if v >= hi { 255 } else { 0 };
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn render(cube: &HsiCube, bands: [usize; 3]) -> CliResult<RgbImage> {
    if let Some(&b) = bands.iter().find(|&&b| b >= cube.bands()) {
        return Err(CliError::Validation(format!(
            "preview band {b} out of range for {} bands",
            cube.bands()
        )));
    }
    let ranges: Vec<(f32, f32)> = bands.iter().map(|&b| percentile_range(cube.band(b))).collect();
    let w = cube.width();
    Ok(RgbImage::from_fn(w as u32, cube.height() as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        let px: Vec<u8> = bands
            .iter()
            .zip(&ranges)
            .map(|(&b, &(lo, hi))| stretch(cube.band(b)[idx], lo, hi))
            .collect();
        Rgb([px[0], px[1], px[2]])
    }))
}

pub fn write_png(cube: &HsiCube, bands: [usize; 3], path: &Path) -> CliResult<()> {
    render(cube, bands)?
        .save(path)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}
