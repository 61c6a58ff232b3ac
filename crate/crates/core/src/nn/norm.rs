//! LayerNorm (affine-free, for adaLN-modulated blocks) and GroupNorm.

use ndarray::{Array1, Array2, Array4};

use super::{Gradients, Real};

const LN_EPS: f64 = 1e-6;
const GN_EPS: f64 = 1e-5;

/// Row-wise layer normalization without learned affine; scale and shift are
/// supplied externally by adaptive modulation.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub dim: usize,
}

pub struct LayerNormCache<T: Real> {
    /// Normalized output.
    xhat: Array2<T>,
    /// 1 / sqrt(var + eps) per row.
    inv_std: Array1<T>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { dim }
    }

    /// x: (rows, dim) -> normalized (rows, dim).
    pub fn forward<T: Real>(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let rows = x.nrows();
        let d = T::from_f64(self.dim as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(rows);
        for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let mut var = T::zero();
            for v in row.iter() {
                let c = *v - mean;
                var += c * c;
            }
            var /= d;
            let s = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * s);
            *is = s;
        }
        let cache = LayerNormCache {
            xhat: xhat.clone(),
            inv_std,
        };
        (xhat, cache)
    }

    pub fn backward<T: Real>(&self, cache: &LayerNormCache<T>, dy: &Array2<T>) -> Array2<T> {
        let d = T::from_f64(self.dim as f64);
        let mut dx = dy.clone();
        for ((mut drow, yrow), &s) in dx
            .outer_iter_mut()
            .zip(cache.xhat.outer_iter())
            .zip(cache.inv_std.iter())
        {
            let mean_dy = drow.sum() / d;
            let mut mean_dy_y = T::zero();
            for (g, y) in drow.iter().zip(yrow.iter()) {
                mean_dy_y += *g * *y;
            }
            mean_dy_y /= d;
            for (g, y) in drow.iter_mut().zip(yrow.iter()) {
                *g = s * (*g - mean_dy - *y * mean_dy_y);
            }
        }
        dx
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm<T: Real> {
    pub groups: usize,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

pub struct GroupNormCache<T: Real> {
    xhat: Array4<T>,
    /// 1 / sqrt(var + eps), per (batch, group).
    inv_std: Array2<T>,
}

/// Largest power of two <= 8 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels.is_multiple_of(g) {
            return g;
        }
    }
    1
}

impl<T: Real> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        GroupNorm {
            groups: group_count(channels),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (b, c, h, w) = x.dim();
        let cg = c / self.groups;
        let count = T::from_f64((cg * h * w) as f64);
        let eps = T::from_f64(GN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array2::zeros((b, self.groups));
        for bi in 0..b {
            for g in 0..self.groups {
                let mut slice = xhat.slice_mut(ndarray::s![bi, g * cg..(g + 1) * cg, .., ..]);
                let mean = slice.sum() / count;
                let mut var = T::zero();
                for v in slice.iter() {
                    let d = *v - mean;
                    var += d * d;
                }
                var /= count;
                let s = T::one() / (var + eps).sqrt();
                slice.mapv_inplace(|v| (v - mean) * s);
                inv_std[[bi, g]] = s;
            }
        }
        let mut y = xhat.clone();
        for (ci, (&ga, &be)) in self.gamma.iter().zip(self.beta.iter()).enumerate() {
            y.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| ga * v + be);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        prefix: &str,
        cache: &GroupNormCache<T>,
        dy: &Array4<T>,
        grads: &mut Gradients<T>,
    ) -> Array4<T> {
        let (b, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let count = T::from_f64((cg * h * w) as f64);

        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        for ci in 0..c {
            let dslice = dy.slice(ndarray::s![.., ci, .., ..]);
            let xslice = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            let mut dg = T::zero();
            for (g, xh) in dslice.iter().zip(xslice.iter()) {
                dg += *g * *xh;
            }
            dgamma[ci] = dg;
            dbeta[ci] = dslice.sum();
        }
        grads.add(&format!("{prefix}.gamma"), dgamma.into_dyn());
        grads.add(&format!("{prefix}.beta"), dbeta.into_dyn());

        // dxhat = dy * gamma, then the usual normalization backward per group
        let mut dx = dy.clone();
        for (ci, &ga) in self.gamma.iter().enumerate() {
            dx.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| v * ga);
        }
        for bi in 0..b {
            for g in 0..self.groups {
                let range = g * cg..(g + 1) * cg;
                let xh = cache.xhat.slice(ndarray::s![bi, range.clone(), .., ..]);
                let mut dslice = dx.slice_mut(ndarray::s![bi, range, .., ..]);
                let s = cache.inv_std[[bi, g]];
                let mean_d = dslice.sum() / count;
                let mut mean_d_x = T::zero();
                for (gd, y) in dslice.iter().zip(xh.iter()) {
                    mean_d_x += *gd * *y;
                }
                mean_d_x /= count;
                for (gd, y) in dslice.iter_mut().zip(xh.iter()) {
                    *gd = s * (*gd - mean_d - *y * mean_d_x);
                }
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

#[allow(unused_imports)]
use ndarray::s;
