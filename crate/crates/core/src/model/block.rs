//! Pre-norm transformer block with adaptive-norm timestep modulation, and the
//! modulated final projection layer.
//!
//! Modulation projections are zero-initialized, so a freshly built trunk is
//! the identity map and conditioning grows in during training.

use ndarray::{s, Array2};
use rand_chacha::ChaCha12Rng;

use crate::nn::{
    gelu, gelu_backward, silu, silu_backward, Attention, AttentionCache, Gradients, LayerNorm,
    LayerNormCache, Linear, LinearCache, Real,
};

/// y[b*n + j, :] = x[b*n + j, :] * (1 + scale[b, :]) + shift[b, :]
fn modulate<T: Real>(x: &Array2<T>, shift: &Array2<T>, scale: &Array2<T>, tokens: usize) -> Array2<T> {
    let mut y = x.clone();
    let batch = shift.nrows();
    for b in 0..batch {
        let sh = shift.row(b);
        let sc = scale.row(b);
        let mut rows = y.slice_mut(s![b * tokens..(b + 1) * tokens, ..]);
        for mut row in rows.outer_iter_mut() {
            for ((v, &s1), &s0) in row.iter_mut().zip(sc.iter()).zip(sh.iter()) {
                *v = *v * (T::one() + s1) + s0;
            }
        }
    }
    y
}

/// Backward of [`modulate`]: returns dx and accumulates (dshift, dscale).
fn modulate_backward<T: Real>(
    x: &Array2<T>,
    scale: &Array2<T>,
    dy: &Array2<T>,
    tokens: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let batch = scale.nrows();
    let dim = scale.ncols();
    let mut dx = dy.clone();
    let mut dshift = Array2::<T>::zeros((batch, dim));
    let mut dscale = Array2::<T>::zeros((batch, dim));
    for b in 0..batch {
        let rows = s![b * tokens..(b + 1) * tokens, ..];
        let xb = x.slice(rows);
        let dyb = dy.slice(rows);
        let sc = scale.row(b);
        for (xrow, dyrow) in xb.outer_iter().zip(dyb.outer_iter()) {
            for (k, (xv, dv)) in xrow.iter().zip(dyrow.iter()).enumerate() {
                dshift[[b, k]] += *dv;
                dscale[[b, k]] += *dv * *xv;
            }
        }
        let mut dxb = dx.slice_mut(rows);
        for mut row in dxb.outer_iter_mut() {
            for (v, &s1) in row.iter_mut().zip(sc.iter()) {
                *v *= T::one() + s1;
            }
        }
    }
    (dx, dshift, dscale)
}

/// y = x + gate[b, :] * branch
fn gated_add<T: Real>(x: &Array2<T>, branch: &Array2<T>, gate: &Array2<T>, tokens: usize) -> Array2<T> {
    let mut y = x.clone();
    let batch = gate.nrows();
    for b in 0..batch {
        let g = gate.row(b);
        let rows = s![b * tokens..(b + 1) * tokens, ..];
        let br = branch.slice(rows);
        let mut yb = y.slice_mut(rows);
        for (mut yrow, brow) in yb.outer_iter_mut().zip(br.outer_iter()) {
            for ((v, &bv), &gv) in yrow.iter_mut().zip(brow.iter()).zip(g.iter()) {
                *v += gv * bv;
            }
        }
    }
    y
}

/// Backward of [`gated_add`]: (dbranch, dgate); dx is dy itself.
fn gated_add_backward<T: Real>(
    branch: &Array2<T>,
    gate: &Array2<T>,
    dy: &Array2<T>,
    tokens: usize,
) -> (Array2<T>, Array2<T>) {
    let batch = gate.nrows();
    let dim = gate.ncols();
    let mut dbranch = dy.clone();
    let mut dgate = Array2::<T>::zeros((batch, dim));
    for b in 0..batch {
        let g = gate.row(b);
        let rows = s![b * tokens..(b + 1) * tokens, ..];
        let br = branch.slice(rows);
        let dyb = dy.slice(rows);
        for (brow, dyrow) in br.outer_iter().zip(dyb.outer_iter()) {
            for (k, (bv, dv)) in brow.iter().zip(dyrow.iter()).enumerate() {
                dgate[[b, k]] += *dv * *bv;
            }
        }
        let mut dbr = dbranch.slice_mut(rows);
        for mut row in dbr.outer_iter_mut() {
            for (v, &gv) in row.iter_mut().zip(g.iter()) {
                *v *= gv;
            }
        }
    }
    (dbranch, dgate)
}

#[derive(Debug, Clone)]
pub struct Mlp<T: Real> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct MlpCache<T: Real> {
    fc1_cache: LinearCache<T>,
    pre_act: Array2<T>,
    fc2_cache: LinearCache<T>,
}

impl<T: Real> Mlp<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        Mlp {
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let (pre_act, fc1_cache) = self.fc1.forward(x);
        let hidden = gelu(&pre_act);
        let (y, fc2_cache) = self.fc2.forward(&hidden);
        (
            y,
            MlpCache {
                fc1_cache,
                pre_act,
                fc2_cache,
            },
        )
    }

    pub fn backward(
        &self,
        prefix: &str,
        cache: &MlpCache<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        let dhidden = self
            .fc2
            .backward(&format!("{prefix}.fc2"), &cache.fc2_cache, dy, grads);
        let dpre = gelu_backward(&cache.pre_act, &dhidden);
        self.fc1
            .backward(&format!("{prefix}.fc1"), &cache.fc1_cache, &dpre, grads)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct DitBlock<T: Real> {
    pub ln1: LayerNorm,
    pub attn: Attention<T>,
    pub ln2: LayerNorm,
    pub mlp: Mlp<T>,
    /// SiLU(t_emb) -> (shift1, scale1, gate1, shift2, scale2, gate2).
    pub ada: Linear<T>,
    pub dim: usize,
}

pub struct DitBlockCache<T: Real> {
    t_emb: Array2<T>,
    ada_cache: LinearCache<T>,
    mods: Array2<T>, // (B, 6D)
    ln1_cache: LayerNormCache<T>,
    ln1_out: Array2<T>,
    attn_cache: AttentionCache<T>,
    attn_out: Array2<T>,
    ln2_cache: LayerNormCache<T>,
    ln2_out: Array2<T>,
    mlp_cache: MlpCache<T>,
    mlp_out: Array2<T>,
    tokens: usize,
}

impl<T: Real> DitBlock<T> {
    pub fn init(dim: usize, heads: usize, time_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        DitBlock {
            ln1: LayerNorm::new(dim),
            attn: Attention::init(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::init(dim, 4 * dim, rng),
            ada: Linear::zeros(time_dim, 6 * dim),
            dim,
        }
    }

    /// x2 (B*N, D), t_emb (B, time_dim).
    pub fn forward(
        &self,
        x2: &Array2<T>,
        t_emb: &Array2<T>,
        batch: usize,
        tokens: usize,
    ) -> (Array2<T>, DitBlockCache<T>) {
        let d = self.dim;
        let ada_in = silu(t_emb);
        let (mods, ada_cache) = self.ada.forward(&ada_in);
        let shift1 = mods.slice(s![.., 0..d]).to_owned();
        let scale1 = mods.slice(s![.., d..2 * d]).to_owned();
        let gate1 = mods.slice(s![.., 2 * d..3 * d]).to_owned();
        let shift2 = mods.slice(s![.., 3 * d..4 * d]).to_owned();
        let scale2 = mods.slice(s![.., 4 * d..5 * d]).to_owned();
        let gate2 = mods.slice(s![.., 5 * d..6 * d]).to_owned();

        let (ln1_out, ln1_cache) = self.ln1.forward(x2);
        let attn_in = modulate(&ln1_out, &shift1, &scale1, tokens);
        let (attn_out, attn_cache) = self.attn.forward(&attn_in, batch, tokens);
        let x_mid = gated_add(x2, &attn_out, &gate1, tokens);

        let (ln2_out, ln2_cache) = self.ln2.forward(&x_mid);
        let mlp_in = modulate(&ln2_out, &shift2, &scale2, tokens);
        let (mlp_out, mlp_cache) = self.mlp.forward(&mlp_in);
        let y = gated_add(&x_mid, &mlp_out, &gate2, tokens);

        (
            y,
            DitBlockCache {
                t_emb: t_emb.clone(),
                ada_cache,
                mods,
                ln1_cache,
                ln1_out,
                attn_cache,
                attn_out,
                ln2_cache,
                ln2_out,
                mlp_cache,
                mlp_out,
                tokens,
            },
        )
    }

    /// Returns (dx, dt_emb).
    pub fn backward(
        &self,
        prefix: &str,
        cache: &DitBlockCache<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> (Array2<T>, Array2<T>) {
        let d = self.dim;
        let tokens = cache.tokens;
        let mods = &cache.mods;
        let scale1 = mods.slice(s![.., d..2 * d]).to_owned();
        let gate1 = mods.slice(s![.., 2 * d..3 * d]).to_owned();
        let scale2 = mods.slice(s![.., 4 * d..5 * d]).to_owned();
        let gate2 = mods.slice(s![.., 5 * d..6 * d]).to_owned();
        let batch = mods.nrows();

        // y = x_mid + gate2 * mlp_out
        let (dmlp_out, dgate2) = gated_add_backward(&cache.mlp_out, &gate2, dy, tokens);
        let mut dx_mid = dy.clone();
        let dmlp_in = self
            .mlp
            .backward(&format!("{prefix}.mlp"), &cache.mlp_cache, &dmlp_out, grads);
        let (dln2_out, dshift2, dscale2) =
            modulate_backward(&cache.ln2_out, &scale2, &dmlp_in, tokens);
        let dx_mid_norm = self.ln2.backward(&cache.ln2_cache, &dln2_out);
        dx_mid.zip_mut_with(&dx_mid_norm, |a, b| *a += *b);

        // x_mid = x_in + gate1 * attn_out
        let (dattn_out, dgate1) = gated_add_backward(&cache.attn_out, &gate1, &dx_mid, tokens);
        let mut dx = dx_mid.clone();
        let dattn_in = self.attn.backward(
            &format!("{prefix}.attn"),
            &cache.attn_cache,
            &dattn_out,
            grads,
        );
        let (dln1_out, dshift1, dscale1) =
            modulate_backward(&cache.ln1_out, &scale1, &dattn_in, tokens);
        let dx_norm = self.ln1.backward(&cache.ln1_cache, &dln1_out);
        dx.zip_mut_with(&dx_norm, |a, b| *a += *b);

        // pack modulation gradients back into the 6D layout
        let mut dmods = Array2::<T>::zeros((batch, 6 * d));
        dmods.slice_mut(s![.., 0..d]).assign(&dshift1);
        dmods.slice_mut(s![.., d..2 * d]).assign(&dscale1);
        dmods.slice_mut(s![.., 2 * d..3 * d]).assign(&dgate1);
        dmods.slice_mut(s![.., 3 * d..4 * d]).assign(&dshift2);
        dmods.slice_mut(s![.., 4 * d..5 * d]).assign(&dscale2);
        dmods.slice_mut(s![.., 5 * d..6 * d]).assign(&dgate2);

        let dada_in = self
            .ada
            .backward(&format!("{prefix}.ada"), &cache.ada_cache, &dmods, grads);
        let dt_emb = silu_backward(&cache.t_emb, &dada_in);
        (dx, dt_emb)
    }

    pub fn param_count(&self) -> usize {
        self.attn.param_count() + self.mlp.param_count() + self.ada.param_count()
    }
}

/// Modulated LayerNorm followed by a linear projection back to stem channels.
#[derive(Debug, Clone)]
pub struct FinalLayer<T: Real> {
    pub ln: LayerNorm,
    /// SiLU(t_emb) -> (shift, scale).
    pub ada: Linear<T>,
    pub proj: Linear<T>,
    pub dim: usize,
}

pub struct FinalLayerCache<T: Real> {
    t_emb: Array2<T>,
    ada_cache: LinearCache<T>,
    mods: Array2<T>,
    ln_cache: LayerNormCache<T>,
    ln_out: Array2<T>,
    proj_cache: LinearCache<T>,
    tokens: usize,
}

impl<T: Real> FinalLayer<T> {
    pub fn init(dim: usize, out_dim: usize, time_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        FinalLayer {
            ln: LayerNorm::new(dim),
            ada: Linear::zeros(time_dim, 2 * dim),
            proj: Linear::init(dim, out_dim, rng),
            dim,
        }
    }

    pub fn forward(
        &self,
        x2: &Array2<T>,
        t_emb: &Array2<T>,
        tokens: usize,
    ) -> (Array2<T>, FinalLayerCache<T>) {
        let d = self.dim;
        let ada_in = silu(t_emb);
        let (mods, ada_cache) = self.ada.forward(&ada_in);
        let shift = mods.slice(s![.., 0..d]).to_owned();
        let scale = mods.slice(s![.., d..2 * d]).to_owned();
        let (ln_out, ln_cache) = self.ln.forward(x2);
        let modded = modulate(&ln_out, &shift, &scale, tokens);
        let (y, proj_cache) = self.proj.forward(&modded);
        (
            y,
            FinalLayerCache {
                t_emb: t_emb.clone(),
                ada_cache,
                mods,
                ln_cache,
                ln_out,
                proj_cache,
                tokens,
            },
        )
    }

    pub fn backward(
        &self,
        prefix: &str,
        cache: &FinalLayerCache<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> (Array2<T>, Array2<T>) {
        let d = self.dim;
        let scale = cache.mods.slice(s![.., d..2 * d]).to_owned();
        let dmodded = self
            .proj
            .backward(&format!("{prefix}.proj"), &cache.proj_cache, dy, grads);
        let (dln_out, dshift, dscale) =
            modulate_backward(&cache.ln_out, &scale, &dmodded, cache.tokens);
        let dx = self.ln.backward(&cache.ln_cache, &dln_out);
        let batch = cache.mods.nrows();
        let mut dmods = Array2::<T>::zeros((batch, 2 * d));
        dmods.slice_mut(s![.., 0..d]).assign(&dshift);
        dmods.slice_mut(s![.., d..2 * d]).assign(&dscale);
        let dada_in = self
            .ada
            .backward(&format!("{prefix}.ada"), &cache.ada_cache, &dmods, grads);
        let dt_emb = silu_backward(&cache.t_emb, &dada_in);
        (dx, dt_emb)
    }

    pub fn param_count(&self) -> usize {
        self.ada.param_count() + self.proj.param_count()
    }
}
