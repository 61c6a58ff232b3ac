//! Image directory loading and pixel normalization.
//!
//! Pixels are normalized to [-1, 1] at ingestion so the data range is
//! symmetric around the zero-mean noise.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Map 8-bit pixels to [-1, 1].
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_u8`], clamped.
pub fn denormalize_to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decode one image to a C x H x W array in [-1, 1], optionally resized to
/// `size x size` (triangle filter, deterministic).
pub fn load_image(path: &Path, size: Option<usize>) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let img = match size {
        Some(s) if img.width() as usize != s || img.height() as usize != s => {
            image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = normalize_u8(px.0[c]);
        }
    }
    Ok(out)
}

/// All decodable images in a directory, sorted by file name.
/// Returns `(name, image)` pairs; undecodable files are an error.
pub fn load_image_dir(dir: &Path, size: Option<usize>) -> Result<Vec<(PathBuf, Array3<f32>)>> {
    let mut paths = list_images(dir)?;
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = load_image(&p, size)?;
        out.push((p, img));
    }
    if out.is_empty() {
        return Err(Error::Argument(format!(
            "no images found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Image file paths in a directory (unsorted).
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Argument(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if IMAGE_EXTS.contains(&ext.as_str()) {
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Decode an 8-bit single-channel label raster (class indices, 255 = ignore).
pub fn load_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0];
    }
    Ok(out)
}

/// Encode a normalized C x H x W image back to RGB8.
pub fn to_rgb8(img: &Array3<f32>) -> image::RgbImage {
    let (_, h, w) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            denormalize_to_u8(img[[0, y as usize, x as usize]]),
            denormalize_to_u8(img[[1, y as usize, x as usize]]),
            denormalize_to_u8(img[[2, y as usize, x as usize]]),
        ])
    })
}
