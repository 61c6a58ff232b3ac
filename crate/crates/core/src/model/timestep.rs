//! Sinusoidal timestep features followed by a 2-layer MLP.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use crate::nn::{silu, silu_backward, Gradients, Linear, LinearCache, Real};

/// Continuous t in [0, 1] is scaled by 1000 before the sinusoidal embedding
/// so the frequency bank matches the discrete-step convention.
const T_SCALE: f64 = 1000.0;

#[derive(Debug, Clone)]
pub struct TimestepEmbedder<T: Real> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub dim: usize,
}

pub struct TimestepCache<T: Real> {
    fc1_cache: LinearCache<T>,
    pre_act: Array2<T>,
    fc2_cache: LinearCache<T>,
}

impl<T: Real> TimestepEmbedder<T> {
    pub fn init(dim: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(dim.is_multiple_of(2), "time embed dim {dim} must be even");
        TimestepEmbedder {
            fc1: Linear::init(dim, dim, rng),
            fc2: Linear::init(dim, dim, rng),
            dim,
        }
    }

    fn frequency_features(&self, t: &Array1<f64>) -> Array2<T> {
        let half = self.dim / 2;
        let mut out = Array2::<T>::zeros((t.len(), self.dim));
        for (i, &tv) in t.iter().enumerate() {
            let ts = tv * T_SCALE;
            for k in 0..half {
                let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
                out[[i, k]] = T::from_f64((ts * omega).cos());
                out[[i, half + k]] = T::from_f64((ts * omega).sin());
            }
        }
        out
    }

    /// t (len B) -> embedding (B, dim).
    pub fn forward(&self, t: &Array1<f64>) -> (Array2<T>, TimestepCache<T>) {
        let freq = self.frequency_features(t);
        let (pre_act, fc1_cache) = self.fc1.forward(&freq);
        let hidden = silu(&pre_act);
        let (out, fc2_cache) = self.fc2.forward(&hidden);
        (
            out,
            TimestepCache {
                fc1_cache,
                pre_act,
                fc2_cache,
            },
        )
    }

    /// Input gradient stops here: the frequency features are not learned.
    pub fn backward(
        &self,
        prefix: &str,
        cache: &TimestepCache<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) {
        let dhidden = self
            .fc2
            .backward(&format!("{prefix}.fc2"), &cache.fc2_cache, dy, grads);
        let dpre = silu_backward(&cache.pre_act, &dhidden);
        self.fc1
            .backward(&format!("{prefix}.fc1"), &cache.fc1_cache, &dpre, grads);
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    #[test]
    fn distinct_timesteps_embed_differently() {
        let mut rng = derive(1, Stream::Init, 0);
        let emb = TimestepEmbedder::<f64>::init(16, &mut rng);
        let (e, _) = emb.forward(&ndarray::arr1(&[0.1, 0.9]));
        let diff: f64 = e
            .row(0)
            .iter()
            .zip(e.row(1).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = derive(2, Stream::Init, 0);
        let mut emb = TimestepEmbedder::<f64>::init(8, &mut rng);
        let t = ndarray::arr1(&[0.3, 0.7]);
        let loss_of = |e: &TimestepEmbedder<f64>| -> f64 {
            e.forward(&t).0.iter().map(|v| v * v).sum()
        };
        let (y, cache) = emb.forward(&t);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = Gradients::new();
        emb.backward("time", &cache, &dy, &mut grads);

        let h = 1e-6;
        let g1 = grads.get("time.fc1.weight").unwrap();
        for idx in [[0usize, 0usize], [3, 5], [7, 2]] {
            let orig = emb.fc1.weight[idx];
            emb.fc1.weight[idx] = orig + h;
            let lp = loss_of(&emb);
            emb.fc1.weight[idx] = orig - h;
            let lm = loss_of(&emb);
            emb.fc1.weight[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = g1[ndarray::IxDyn(&idx)];
            assert!((num - ana).abs() < 1e-5 * (1.0 + num.abs()), "{num} vs {ana}");
        }
    }
}
