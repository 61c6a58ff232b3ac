//! Stage-1 visual quality heuristics: exposure fractions and the
//! variance-of-Laplacian sharpness score.

use ndarray::Array2;

/// Fraction of pixels at or below `low` / at or above `high` (8-bit scale).
pub fn exposure_fractions(gray: &Array2<u8>, low: f64, high: f64) -> (f64, f64) {
    let lo = (low * 255.0).round() as u8;
    let hi = (high * 255.0).round() as u8;
    let total = gray.len() as f64;
    let mut dark = 0usize;
    let mut bright = 0usize;
    for &v in gray.iter() {
        if v <= lo {
            dark += 1;
        }
        if v >= hi {
            bright += 1;
        }
    }
    (dark as f64 / total, bright as f64 / total)
}

/// Variance of the 4-neighbor Laplacian over the image interior.
/// Low values indicate blur. Images smaller than 3x3 score 0.
pub fn variance_of_laplacian(gray: &Array2<u8>) -> f64 {
    let (h, w) = gray.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let n = ((h - 2) * (w - 2)) as f64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = gray[[y - 1, x]] as f64
                + gray[[y + 1, x]] as f64
                + gray[[y, x - 1]] as f64
                + gray[[y, x + 1]] as f64
                - 4.0 * gray[[y, x]] as f64;
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    let mean = sum / n;
    sum_sq / n - mean * mean
}
