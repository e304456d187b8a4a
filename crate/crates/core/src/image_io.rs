//! 8-bit PNG input/output. Pixel values map to `[0, 1]` by division by 255.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{shape_err, NafError, Result};
use crate::tensor::Tensor3;

fn image_err(path: &Path, e: impl ToString) -> NafError {
    NafError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads any PNG as an RGB tensor with values in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor3::new(h as usize, w as usize, 3, data)
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel tensor as 8-bit RGB, clamping to `[0, 1]`.
pub fn save_png(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if t.channels() != 3 {
        return shape_err(format!("PNG export needs 3 channels, got {}", t.channels()));
    }
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(
        t.width() as u32,
        t.height() as u32,
        t.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Writes channel 0 as an 8-bit grayscale heat map scaled to its own min/max.
pub fn save_heatmap_png(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let values: Vec<f32> = t.data().iter().step_by(t.channels()).copied().collect();
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let pixels = values
        .iter()
        .map(|&v| if span > 0.0 { to_u8((v - lo) / span) } else { 0 })
        .collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(t.width() as u32, t.height() as u32, pixels)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| image_err(path, e))
}
