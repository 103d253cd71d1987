//! Binary PPM output with a linear grayscale over the frame's range.

use branchvis_core::query::Field;
use branchvis_core::solver::{FieldState, GridSpec};

/// Gray level for `v` in `[min, max]`; a flat frame renders mid-gray.
pub fn gray(v: f64, min: f64, max: f64) -> u8 {
    if max <= min {
        return 128;
    }
    (255.0 * (v - min) / (max - min)).round().clamp(0.0, 255.0) as u8
}

/// P6 image, one pixel per cell, first row is `j = 0`.
pub fn render_ppm(state: &FieldState, grid: &GridSpec, field: Field) -> Vec<u8> {
    let values: Vec<f64> = (0..grid.cells()).map(|k| field.value(state, k)).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P6\n{} {}\n255\n", grid.nx, grid.ny).into_bytes();
    out.reserve(values.len() * 3);
    for v in values {
        let g = gray(v, min, max);
        out.extend_from_slice(&[g, g, g]);
    }
    out
}
