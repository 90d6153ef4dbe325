//! Netpbm grids for eyeballing decoded images.

use std::path::Path;

use anyhow::{bail, Context, Result};
use recall::data::ImageShape;

/// Lays out `images` (CHW, values in `[0,1]`) in rows of `columns` with a
/// one-pixel gap and writes a binary PGM (one channel) or PPM (three).
pub fn write_grid(path: &Path, shape: ImageShape, images: &[&[f32]], columns: usize) -> Result<()> {
    let ImageShape {
        channels,
        height,
        width,
    } = shape;
    if channels != 1 && channels != 3 {
        bail!("cannot write {channels}-channel images");
    }
    if images.is_empty() {
        bail!("no images for {}", path.display());
    }
    let cols = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (w, h) = (cols * (width + 1) - 1, rows * (height + 1) - 1);
    let mut pixels = vec![0u8; w * h * channels];
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / cols) * (height + 1), (i % cols) * (width + 1));
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = img[(c * height + y) * width + x].clamp(0.0, 1.0);
                    pixels[((oy + y) * w + ox + x) * channels + c] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
