//! Synthetic two-texture segmentation corpora.
//!
//! Each image is split into two regions carrying oriented stripe textures
//! (vertical vs horizontal) with matched amplitude and period, random phase,
//! and per-pixel noise. The label marks which texture owns each pixel, so the
//! only way to segment well is to read local structure, not brightness.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::data::to_rgb8;
use crate::error::Result;
use crate::probe::SegSample;
use crate::rng::{derive, Stream};

const STRIPE_PERIOD: f64 = 16.0;
const STRIPE_AMPLITUDE: f64 = 0.65;
const PIXEL_NOISE: f64 = 0.08;

fn stripe(coord: usize, phase: f64, period: f64) -> f64 {
    STRIPE_AMPLITUDE * ((coord as f64 + phase) * std::f64::consts::TAU / period).sin()
}

/// One sample. Texture 0 = vertical stripes (varies along x), texture 1 =
/// horizontal stripes (varies along y).
pub fn two_texture_sample(size: usize, seed: u64, index: u64) -> SegSample {
    two_texture_sample_with_period(size, seed, index, STRIPE_PERIOD)
}

/// [`two_texture_sample`] with an explicit stripe period (calibration knob).
pub fn two_texture_sample_with_period(
    size: usize,
    seed: u64,
    index: u64,
    period: f64,
) -> SegSample {
    let mut rng: ChaCha12Rng = derive(seed, Stream::Noise, index ^ 0x5eed_7e37);
    let phase0: f64 = rng.random::<f64>() * period;
    let phase1: f64 = rng.random::<f64>() * period;
    // split orientation and which texture sits on which side
    let vertical_split = rng.random::<bool>();
    let swap = rng.random::<bool>();
    let lo = size / 4;
    let hi = (3 * size) / 4;
    let boundary = rng.random_range(lo..=hi);
    // mild per-channel gain so the corpus is not exactly grayscale
    let gains = [
        1.0,
        0.9 + 0.2 * rng.random::<f64>(),
        0.9 + 0.2 * rng.random::<f64>(),
    ];

    let mut image = Array3::<f32>::zeros((3, size, size));
    let mut label = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let first_region = if vertical_split { x < boundary } else { y < boundary };
            let texture = u8::from(first_region == swap);
            let base = if texture == 0 {
                stripe(x, phase0, period)
            } else {
                stripe(y, phase1, period)
            };
            label[[y, x]] = texture;
            for c in 0..3 {
                let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * PIXEL_NOISE;
                image[[c, y, x]] = ((base * gains[c]) + noise).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    SegSample { image, label }
}

/// A corpus of `count` samples at `size x size`.
pub fn two_texture_corpus(count: usize, size: usize, seed: u64) -> Vec<SegSample> {
    (0..count)
        .map(|i| two_texture_sample(size, seed, i as u64))
        .collect()
}

/// Write images only (pre-training input layout).
pub fn write_images(dir: &Path, samples: &[SegSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        to_rgb8(&s.image).save(dir.join(format!("tex{i:05}.png")))
            .map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}

/// Write the probe layout: `<dir>/images/*.png` and `<dir>/labels/*.png`
/// (8-bit class-index rasters).
pub fn write_labeled(dir: &Path, samples: &[SegSample]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&labels)?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("tex{i:05}.png");
        to_rgb8(&s.image)
            .save(images.join(&name))
            .map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
        let (h, w) = s.label.dim();
        let raster = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([s.label[[y as usize, x as usize]]])
        });
        raster
            .save(labels.join(&name))
            .map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
    }
    Ok(())
}

/// Richly varied synthetic photo stand-in: a color gradient plus random
/// rectangles. Patch statistics vary strongly across the image, so curation's
/// semantic-variance filter keeps it.
pub fn collage_image(size: usize, seed: u64, index: u64) -> Array3<f32> {
    let mut rng: ChaCha12Rng = derive(seed, Stream::Noise, index ^ 0xc0_11a6e);
    let mut img = Array3::<f32>::zeros((3, size, size));
    for c in 0..3 {
        let base: f64 = rng.random::<f64>() * 0.8 - 0.4;
        let gx: f64 = (rng.random::<f64>() - 0.5) * 1.2 / size as f64;
        let gy: f64 = (rng.random::<f64>() - 0.5) * 1.2 / size as f64;
        for y in 0..size {
            for x in 0..size {
                img[[c, y, x]] = (base + gx * x as f64 + gy * y as f64) as f32;
            }
        }
    }
    for _ in 0..6 {
        let x0 = rng.random_range(0..size);
        let y0 = rng.random_range(0..size);
        let w = rng.random_range(size / 8..size / 2);
        let h = rng.random_range(size / 8..size / 2);
        let color = [
            rng.random::<f64>() * 1.6 - 0.8,
            rng.random::<f64>() * 1.6 - 0.8,
            rng.random::<f64>() * 1.6 - 0.8,
        ];
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                for c in 0..3 {
                    img[[c, y, x]] = color[c] as f32;
                }
            }
        }
    }
    for v in img.iter_mut() {
        let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.03;
        *v = (*v + noise as f32).clamp(-1.0, 1.0);
    }
    img
}
