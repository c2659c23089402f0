//! Fixed color ramp for gray maps, so renders from different runs compare
//! directly.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

/// Nine evenly spaced stops of a perceptually monotone dark-blue to yellow
/// ramp. Gray 0 (weak signal) is the first stop.
pub const RAMP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Color of one gray value; inputs are clamped to `[0, 1]`, NaN maps to 0.
pub fn color(g: f64) -> [u8; 3] {
    let g = if g.is_nan() { 0.0 } else { g.clamp(0.0, 1.0) };
    let pos = g * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let frac = pos - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    std::array::from_fn(|k| (f64::from(a[k]) + frac * (f64::from(b[k]) - f64::from(a[k]))).round() as u8)
}

/// One pixel per cell, row 0 at the top.
pub fn render(gray: &Array2<f64>) -> RgbImage {
    let (h, w) = gray.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(color(gray[[y as usize, x as usize]])))
}

pub fn save(gray: &Array2<f64>, path: &Path) -> image::ImageResult<()> {
    render(gray).save_with_format(path, image::ImageFormat::Png)
}

/// Gray map quantized to 8 bits for a plain grayscale PNG.
pub fn to_u8(gray: &Array2<f64>) -> Array2<u8> {
    gray.mapv(|g| (if g.is_nan() { 0.0 } else { g.clamp(0.0, 1.0) } * 255.0).round() as u8)
}
