//! Pluggable embedding providers for the feature-based filtering stage.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};

/// Embedding provider: a global vector for dedup, patch rows for the
/// semantic-variance filter. Global embeddings must be L2-normalized.
pub trait Embedder: Sync {
    fn name(&self) -> &str;
    fn embed_global(&self, img: &Array3<f32>) -> Result<Array1<f64>>;
    /// P x E matrix, one row per patch.
    fn embed_patches(&self, img: &Array3<f32>) -> Result<Array2<f64>>;
}

/// Binary relevance scorer for the content stage; higher means in-domain.
pub trait ContentClassifier: Sync {
    fn name(&self) -> &str;
    fn score(&self, img: &Array3<f32>) -> Result<f64>;
}

/// Default classifier: keeps everything (training a real one is a separate
/// concern; the pipeline only needs the slot).
pub struct AcceptAll;

impl ContentClassifier for AcceptAll {
    fn name(&self) -> &str {
        "accept-all"
    }
    fn score(&self, _img: &Array3<f32>) -> Result<f64> {
        Ok(1.0)
    }
}

const THUMB: usize = 8;
const PATCH_GRID: usize = 8;

/// Self-contained deterministic embedder: the global vector is an 8x8x3
/// average-pooled thumbnail (L2-normalized), patch rows are per-cell channel
/// means and standard deviations. Exact duplicates embed identically;
/// constant images produce zero patch variance.
pub struct BuiltinEmbedder;

fn cell_bounds(size: usize, cells: usize, i: usize) -> (usize, usize) {
    let start = i * size / cells;
    let end = ((i + 1) * size / cells).max(start + 1).min(size);
    (start, end.max(start + 1))
}

impl Embedder for BuiltinEmbedder {
    fn name(&self) -> &str {
        "builtin-v1"
    }

    fn embed_global(&self, img: &Array3<f32>) -> Result<Array1<f64>> {
        let (c, h, w) = img.dim();
        if h == 0 || w == 0 {
            return Err(Error::Argument("empty image".into()));
        }
        let mut v = Array1::<f64>::zeros(c * THUMB * THUMB);
        for ci in 0..c {
            for ty in 0..THUMB {
                let (y0, y1) = cell_bounds(h, THUMB, ty);
                for tx in 0..THUMB {
                    let (x0, x1) = cell_bounds(w, THUMB, tx);
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += img[[ci, y, x]] as f64;
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    v[(ci * THUMB + ty) * THUMB + tx] = acc / count;
                }
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-12 {
            // exactly mid-gray everywhere; any fixed unit vector will do
            let mut e = Array1::<f64>::zeros(c * THUMB * THUMB);
            e[0] = 1.0;
            return Ok(e);
        }
        Ok(v / norm)
    }

    fn embed_patches(&self, img: &Array3<f32>) -> Result<Array2<f64>> {
        let (c, h, w) = img.dim();
        if h == 0 || w == 0 {
            return Err(Error::Argument("empty image".into()));
        }
        let cells_y = PATCH_GRID.min(h);
        let cells_x = PATCH_GRID.min(w);
        let mut rows = Array2::<f64>::zeros((cells_y * cells_x, 2 * c));
        for ty in 0..cells_y {
            let (y0, y1) = cell_bounds(h, cells_y, ty);
            for tx in 0..cells_x {
                let (x0, x1) = cell_bounds(w, cells_x, tx);
                let row = ty * cells_x + tx;
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for ci in 0..c {
                    let mut sum = 0.0f64;
                    let mut sum_sq = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = img[[ci, y, x]] as f64;
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mean = sum / count;
                    rows[[row, ci]] = mean;
                    rows[[row, c + ci]] = (sum_sq / count - mean * mean).max(0.0).sqrt();
                }
            }
        }
        Ok(rows)
    }
}

/// Look up a named embedder.
pub fn embedder_by_name(name: &str) -> Result<Box<dyn Embedder>> {
    match name {
        "builtin-v1" | "builtin" => Ok(Box::new(BuiltinEmbedder)),
        other => Err(Error::Config(format!("unknown embedder `{other}`"))),
    }
}
