//! Dense layer y = x W + b with W stored (in, out).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Gradients, Real};

#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

pub struct LinearCache<T: Real> {
    input: Array2<T>,
}

impl<T: Real> Linear<T> {
    /// He-style uniform init over fan-in, like torch's Linear default.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Array2::zeros((in_dim, out_dim));
        for v in weight.iter_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        let mut bias = Array1::zeros(out_dim);
        for v in bias.iter_mut() {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        Linear { weight, bias }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LinearCache<T>) {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        (y, LinearCache { input: x.clone() })
    }

    pub fn forward_nocache(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(
        &self,
        prefix: &str,
        cache: &LinearCache<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        let dw = cache.input.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        grads.add(&format!("{prefix}.weight"), dw.into_dyn());
        grads.add(&format!("{prefix}.bias"), db.into_dyn());
        dy.dot(&self.weight.t())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}
