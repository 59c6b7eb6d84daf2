//! Binary PPM (P6) output.

use std::io::Write;

use crate::error::{Error, Result};

/// `[-1, 1] → 0..=255`, clamping out-of-range values.
pub fn to_byte(v: f64) -> u8 {
    let scaled = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round();
    scaled as u8
}

/// Writes a grayscale image as P6, replicating the value over RGB.
pub fn write_ppm_gray<W: Write>(mut w: W, width: usize, height: usize, pixels: &[f64]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}x{height}");
    write!(w, "P6\n{width} {height}\n255\n")?;
    let mut body = Vec::with_capacity(3 * pixels.len());
    for &p in pixels {
        let b = to_byte(p);
        body.extend_from_slice(&[b, b, b]);
    }
    w.write_all(&body)
}

/// Tiles square images row-major into a grid with `cols` columns; empty
/// cells stay at -1.
pub fn tile_grid(images: &[Vec<f64>], side: usize, cols: usize) -> Result<(usize, usize, Vec<f64>)> {
    if cols == 0 || images.is_empty() {
        return Err(Error::invalid("tile_grid needs at least one image and one column"));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != side * side) {
        return Err(Error::shape("tile_grid", side * side, bad.len()));
    }
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * side, rows * side);
    let mut out = vec![-1.0; w * h];
    for (k, im) in images.iter().enumerate() {
        let (gy, gx) = (k / cols, k % cols);
        for y in 0..side {
            let dst = (gy * side + y) * w + gx * side;
            out[dst..dst + side].copy_from_slice(&im[y * side..(y + 1) * side]);
        }
    }
    Ok((w, h, out))
}

/// Maps nonnegative values into `[-1, 1]` with `scale ↦ 1`; a zero scale
/// renders black.
pub fn magnitude_to_unit(values: &[f64], scale: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&v| if scale > 0.0 { 2.0 * (v / scale).min(1.0) - 1.0 } else { -1.0 })
        .collect()
}
