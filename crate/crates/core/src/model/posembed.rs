//! Fixed 2D sin/cos positional embeddings on the token grid.
//!
//! Non-learned, so sliding-window inference at other resolutions reuses the
//! same weights.

use ndarray::Array2;

use crate::nn::Real;

/// Embedding table for an `h x w` token grid, shape (h*w, dim).
/// `dim` must be divisible by 4 (sin/cos for each of the two axes).
pub fn grid_2d<T: Real>(h: usize, w: usize, dim: usize) -> Array2<T> {
    assert!(dim.is_multiple_of(4), "positional dim {dim} not divisible by 4");
    let quarter = dim / 4;
    let mut pe = Array2::<T>::zeros((h * w, dim));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                let (ys, yc) = ((y as f64 * omega).sin(), (y as f64 * omega).cos());
                let (xs, xc) = ((x as f64 * omega).sin(), (x as f64 * omega).cos());
                pe[[row, k]] = T::from_f64(ys);
                pe[[row, quarter + k]] = T::from_f64(yc);
                pe[[row, 2 * quarter + k]] = T::from_f64(xs);
                pe[[row, 3 * quarter + k]] = T::from_f64(xc);
            }
        }
    }
    pe
}
