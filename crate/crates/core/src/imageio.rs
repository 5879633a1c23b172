//! PNG encodings of the three per-frame maps.
//!
//! * RGB: 8-bit, three channels.
//! * Depth: 16-bit grayscale holding `round(depth_mm * 10)`, 0 = no surface.
//! * Segmentation: 8-bit grayscale class ids.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::scenegen::{class, DepthMap, RgbFrame, SegMap};
use crate::Error;

/// Depth PNG units per millimetre.
pub const DEPTH_UNITS_PER_MM: f32 = 10.0;

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn quantize_rgb(rgb: &RgbFrame) -> RgbImage {
    ImageBuffer::from_fn(rgb.width(), rgb.height(), |x, y| {
        let p = rgb.get_pixel(x, y);
        Rgb(p.0.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn dequantize_rgb(rgb: &RgbImage) -> RgbFrame {
    ImageBuffer::from_fn(rgb.width(), rgb.height(), |x, y| {
        Rgb(rgb.get_pixel(x, y).0.map(|c| c as f32 / 255.0))
    })
}

pub fn quantize_depth(depth: &DepthMap) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    ImageBuffer::from_fn(depth.width(), depth.height(), |x, y| {
        let z = depth.get_pixel(x, y)[0];
        Luma([(z * DEPTH_UNITS_PER_MM).round().clamp(0.0, u16::MAX as f32) as u16])
    })
}

pub fn save_rgb(path: &Path, rgb: &RgbFrame) -> Result<(), Error> {
    ensure_parent(path)?;
    quantize_rgb(rgb).save(path).map_err(|e| Error::image(path, e))
}

pub fn load_rgb(path: &Path) -> Result<RgbFrame, Error> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(dequantize_rgb(&img.to_rgb8()))
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<(), Error> {
    ensure_parent(path)?;
    quantize_depth(depth).save(path).map_err(|e| Error::image(path, e))
}

pub fn load_depth(path: &Path) -> Result<DepthMap, Error> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let raw = img.to_luma16();
    Ok(ImageBuffer::from_fn(raw.width(), raw.height(), |x, y| {
        Luma([raw.get_pixel(x, y)[0] as f32 / DEPTH_UNITS_PER_MM])
    }))
}

pub fn save_seg(path: &Path, seg: &SegMap) -> Result<(), Error> {
    ensure_parent(path)?;
    seg.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_seg(path: &Path) -> Result<SegMap, Error> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let seg = img.to_luma8();
    if let Some(bad) = seg.pixels().find(|p| p[0] as usize >= class::COUNT) {
        return Err(Error::invalid(format!(
            "{}: class id {} outside {{0, 1, 2}}",
            path.display(),
            bad[0]
        )));
    }
    Ok(seg)
}
