//! Multi-head self-attention over token sequences.

use ndarray::{s, Array2, Array3, Axis};
use rand_chacha::ChaCha12Rng;

use super::{Gradients, Linear, Real};

#[derive(Debug, Clone)]
pub struct Attention<T: Real> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache<T: Real> {
    x2: Array2<T>,
    qkv_out: Array2<T>,
    /// Softmax probabilities per (batch * head), row-major (N, N).
    probs: Array3<T>,
    ctx: Array2<T>,
    batch: usize,
    tokens: usize,
}

impl<T: Real> Attention<T> {
    pub fn init(dim: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by heads {heads}");
        Attention {
            qkv: Linear::init(dim, 3 * dim, rng),
            proj: Linear::init(dim, dim, rng),
            heads,
            dim,
        }
    }

    /// x2: (B*N, dim) flattened token matrix.
    pub fn forward(&self, x2: &Array2<T>, batch: usize, tokens: usize) -> (Array2<T>, AttentionCache<T>) {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qkv_out = self.qkv.forward_nocache(x2); // (B*N, 3D)
        let mut probs = Array3::<T>::zeros((batch * self.heads, tokens, tokens));
        let mut ctx = Array2::<T>::zeros((batch * tokens, d));
        for b in 0..batch {
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let qkv_b = qkv_out.slice(rows);
            for hh in 0..self.heads {
                let q = qkv_b.slice(s![.., hh * dh..(hh + 1) * dh]);
                let k = qkv_b.slice(s![.., d + hh * dh..d + (hh + 1) * dh]);
                let v = qkv_b.slice(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]);
                let mut scores = q.dot(&k.t());
                scores.mapv_inplace(|x| x * scale);
                // row softmax
                for mut row in scores.outer_iter_mut() {
                    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    row.mapv_inplace(|x| (x - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum);
                }
                let out = scores.dot(&v); // (N, dh)
                ctx.slice_mut(s![b * tokens..(b + 1) * tokens, hh * dh..(hh + 1) * dh])
                    .assign(&out);
                probs
                    .index_axis_mut(Axis(0), b * self.heads + hh)
                    .assign(&scores);
            }
        }
        let (y, _) = self.proj.forward(&ctx);
        (
            y,
            AttentionCache {
                x2: x2.clone(),
                qkv_out,
                probs,
                ctx,
                batch,
                tokens,
            },
        )
    }

    pub fn backward(
        &self,
        prefix: &str,
        cache: &AttentionCache<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (batch, tokens) = (cache.batch, cache.tokens);

        // proj backward
        let dw_proj = cache.ctx.t().dot(dy);
        grads.add(&format!("{prefix}.proj.weight"), dw_proj.into_dyn());
        grads.add(
            &format!("{prefix}.proj.bias"),
            dy.sum_axis(Axis(0)).into_dyn(),
        );
        let dctx = dy.dot(&self.proj.weight.t()); // (B*N, D)

        let mut dqkv = Array2::<T>::zeros((batch * tokens, 3 * d));
        for b in 0..batch {
            let rows = s![b * tokens..(b + 1) * tokens, ..];
            let qkv_b = cache.qkv_out.slice(rows);
            for hh in 0..self.heads {
                let q = qkv_b.slice(s![.., hh * dh..(hh + 1) * dh]);
                let k = qkv_b.slice(s![.., d + hh * dh..d + (hh + 1) * dh]);
                let v = qkv_b.slice(s![.., 2 * d + hh * dh..2 * d + (hh + 1) * dh]);
                let p = cache.probs.index_axis(Axis(0), b * self.heads + hh);
                let dout = dctx.slice(s![b * tokens..(b + 1) * tokens, hh * dh..(hh + 1) * dh]);

                let dv = p.t().dot(&dout); // (N, dh)
                let dp = dout.dot(&v.t()); // (N, N)
                // softmax backward: dS = P o (dP - rowsum(dP o P))
                let mut ds = dp.to_owned();
                for (mut ds_row, p_row) in ds.outer_iter_mut().zip(p.outer_iter()) {
                    let mut dot = T::zero();
                    for (a, b) in ds_row.iter().zip(p_row.iter()) {
                        dot += *a * *b;
                    }
                    for (a, b) in ds_row.iter_mut().zip(p_row.iter()) {
                        *a = (*a - dot) * *b;
                    }
                }
                ds.mapv_inplace(|x| x * scale);
                let dq = ds.dot(&k); // (N, dh)
                let dk = ds.t().dot(&q); // (N, dh)

                dqkv.slice_mut(s![b * tokens..(b + 1) * tokens, hh * dh..(hh + 1) * dh])
                    .assign(&dq);
                dqkv.slice_mut(s![
                    b * tokens..(b + 1) * tokens,
                    d + hh * dh..d + (hh + 1) * dh
                ])
                .assign(&dk);
                dqkv.slice_mut(s![
                    b * tokens..(b + 1) * tokens,
                    2 * d + hh * dh..2 * d + (hh + 1) * dh
                ])
                .assign(&dv);
            }
        }

        let dw_qkv = cache.x2.t().dot(&dqkv);
        grads.add(&format!("{prefix}.qkv.weight"), dw_qkv.into_dyn());
        grads.add(
            &format!("{prefix}.qkv.bias"),
            dqkv.sum_axis(Axis(0)).into_dyn(),
        );
        dqkv.dot(&self.qkv.weight.t())
    }

    pub fn param_count(&self) -> usize {
        self.qkv.param_count() + self.proj.param_count()
    }
}
