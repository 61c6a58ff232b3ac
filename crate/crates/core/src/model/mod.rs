//! UDiT: a VAE-free pixel-space diffusion transformer.
//!
//! Strided convolutions take pixels down to the token grid, a pre-norm
//! transformer trunk with adaptive-norm timestep modulation does the semantic
//! work, and mirrored transposed convolutions take tokens back up to pixels.
//! There is no patchify/unpatchify anywhere: channels never trade places with
//! spatial dimensions, which [`UDiT::graph`] lets tests assert directly.
//!
//! A built model is immutable during `forward`/`extract_features` (both take
//! `&self`), so it can be shared across threads for concurrent inference;
//! training steps need `&mut` and therefore exclusive access.

mod block;
mod posembed;
mod timestep;

pub use block::{DitBlock, FinalLayer, Mlp};
pub use timestep::TimestepEmbedder;

use ndarray::{s, Array1, Array4, ArrayViewD, ArrayViewMutD};
use rand_distr::StandardNormal;
use rand::Rng;

use crate::erank::FeatureSource;
use crate::error::{Error, Result};
use crate::nn::{
    from_channel_last, silu, silu_backward, to_channel_last, Conv2d, Conv2dCache, ConvTranspose2d,
    ConvTranspose2dCache, Gradients, GroupNorm, GroupNormCache, Real,
};
use crate::rng::{derive, Stream};

use block::{DitBlockCache, FinalLayerCache};
use timestep::TimestepCache;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UDiTConfig {
    pub in_channels: usize,
    /// Power-of-two spatial reduction between pixels and tokens.
    pub down_factor: usize,
    /// Output channels of each stride-2 stem stage; one entry per stage.
    pub stem_channels: Vec<usize>,
    pub trunk_depth: usize,
    /// Token dimension D.
    pub trunk_width: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    /// Trunk block whose output feeds feature extraction.
    pub feature_tap_layer: usize,
    pub head_zero_init: bool,
}

impl UDiTConfig {
    /// Named presets accepted anywhere a config is read.
    pub fn preset(name: &str) -> Result<UDiTConfig> {
        let cfg = match name {
            // Desk-scale preset. down_factor 4 keeps the token width (96) at
            // least as large as the pixel content of one stem patch
            // (4*4*3 = 48), matching the capacity relation of the larger
            // presets; a narrower-than-patch trunk turns epsilon-prediction
            // into lossy noise passthrough instead of signal modeling.
            "udit-nano" => UDiTConfig {
                in_channels: 3,
                down_factor: 4,
                stem_channels: vec![16, 32],
                trunk_depth: 4,
                trunk_width: 96,
                heads: 4,
                time_embed_dim: 96,
                feature_tap_layer: 2,
                head_zero_init: true,
            },
            "udit-s" => UDiTConfig {
                in_channels: 3,
                down_factor: 8,
                stem_channels: vec![96, 192, 384],
                trunk_depth: 12,
                trunk_width: 472,
                heads: 8,
                time_embed_dim: 472,
                feature_tap_layer: 6,
                head_zero_init: true,
            },
            "udit-b" => UDiTConfig {
                in_channels: 3,
                down_factor: 8,
                stem_channels: vec![128, 256, 512],
                trunk_depth: 14,
                trunk_width: 640,
                heads: 10,
                time_embed_dim: 640,
                feature_tap_layer: 7,
                head_zero_init: true,
            },
            "udit-l" => UDiTConfig {
                in_channels: 3,
                down_factor: 8,
                stem_channels: vec![160, 320, 640],
                trunk_depth: 18,
                trunk_width: 1024,
                heads: 16,
                time_embed_dim: 1024,
                feature_tap_layer: 9,
                head_zero_init: true,
            },
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels.is_empty() {
            return Err(Error::Config("stem_channels must not be empty".into()));
        }
        let expected = 1usize << self.stem_channels.len();
        if self.down_factor != expected {
            return Err(Error::Config(format!(
                "down_factor {} must be 2^len(stem_channels) = {expected}",
                self.down_factor
            )));
        }
        if self.trunk_depth == 0 {
            return Err(Error::Config("trunk_depth must be positive".into()));
        }
        if self.trunk_width == 0 || !self.trunk_width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "trunk_width {} must be a positive multiple of heads {}",
                self.trunk_width, self.heads
            )));
        }
        if !self.trunk_width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "trunk_width {} must be divisible by 4 for 2D positional embeddings",
                self.trunk_width
            )));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim {} must be positive and even",
                self.time_embed_dim
            )));
        }
        if self.feature_tap_layer >= self.trunk_depth {
            return Err(Error::Config(format!(
                "feature_tap_layer {} out of range for trunk_depth {}",
                self.feature_tap_layer, self.trunk_depth
            )));
        }
        if self.in_channels == 0 || self.stem_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Exact parameter count from the dimensions alone (no allocation).
    pub fn param_count(&self) -> usize {
        let d = self.trunk_width;
        let te = self.time_embed_dim;
        let mut total = 0usize;
        // stem
        let mut prev = self.in_channels;
        for &c in &self.stem_channels {
            total += 9 * prev * c + c; // conv 3x3
            total += 2 * c; // groupnorm affine
            prev = c;
        }
        let s_last = *self.stem_channels.last().unwrap();
        total += s_last * d + d; // 1x1 stem projection
        // timestep embedder
        total += 2 * (te * te + te);
        // trunk
        let per_block = (d * 3 * d + 3 * d)   // qkv
            + (d * d + d)                     // attn proj
            + (d * 4 * d + 4 * d) + (4 * d * d + d) // mlp
            + (te * 6 * d + 6 * d); // adaLN
        total += self.trunk_depth * per_block;
        // final layer
        total += te * 2 * d + 2 * d;
        total += d * s_last + s_last;
        // head (mirrored transposed convs)
        let mut chans: Vec<usize> = self.stem_channels.clone();
        chans.reverse(); // s_last, ..., s0
        for w in chans.windows(2) {
            total += 16 * w[0] * w[1] + w[1]; // convT 4x4
            total += 2 * w[1];
        }
        total += 16 * chans[chans.len() - 1] * self.in_channels + self.in_channels;
        total
    }
}

#[derive(Debug, Clone)]
struct StemStage<T: Real> {
    conv: Conv2d<T>,
    norm: GroupNorm<T>,
}

struct StemStageCache<T: Real> {
    conv: Conv2dCache<T>,
    norm: GroupNormCache<T>,
    pre_act: Array4<T>,
}

impl<T: Real> StemStage<T> {
    fn forward(&self, x: &Array4<T>) -> (Array4<T>, StemStageCache<T>) {
        let (h, conv) = self.conv.forward(x);
        let (pre_act, norm) = self.norm.forward(&h);
        let y = silu(&pre_act);
        (
            y,
            StemStageCache {
                conv,
                norm,
                pre_act,
            },
        )
    }

    fn backward(
        &self,
        prefix: &str,
        cache: &StemStageCache<T>,
        dy: &Array4<T>,
        grads: &mut Gradients<T>,
    ) -> Array4<T> {
        let dpre = silu_backward(&cache.pre_act, dy);
        let dconv = self
            .norm
            .backward(&format!("{prefix}.norm"), &cache.norm, &dpre, grads);
        self.conv
            .backward(&format!("{prefix}.conv"), &cache.conv, &dconv, grads)
    }
}

#[derive(Debug, Clone)]
struct HeadStage<T: Real> {
    conv: ConvTranspose2d<T>,
    /// `None` on the last stage (the zero-initialized output projection).
    norm: Option<GroupNorm<T>>,
}

struct HeadStageCache<T: Real> {
    conv: ConvTranspose2dCache<T>,
    norm: Option<(GroupNormCache<T>, Array4<T>)>,
}

impl<T: Real> HeadStage<T> {
    fn forward(&self, x: &Array4<T>) -> (Array4<T>, HeadStageCache<T>) {
        let (h, conv) = self.conv.forward(x);
        match &self.norm {
            Some(norm) => {
                let (pre_act, nc) = norm.forward(&h);
                let y = silu(&pre_act);
                (
                    y,
                    HeadStageCache {
                        conv,
                        norm: Some((nc, pre_act)),
                    },
                )
            }
            None => (h, HeadStageCache { conv, norm: None }),
        }
    }

    fn backward(
        &self,
        prefix: &str,
        cache: &HeadStageCache<T>,
        dy: &Array4<T>,
        grads: &mut Gradients<T>,
    ) -> Array4<T> {
        let dconv = match (&self.norm, &cache.norm) {
            (Some(norm), Some((nc, pre_act))) => {
                let dpre = silu_backward(pre_act, dy);
                norm.backward(&format!("{prefix}.norm"), nc, &dpre, grads)
            }
            _ => dy.clone(),
        };
        self.conv
            .backward(&format!("{prefix}.conv"), &cache.conv, &dconv, grads)
    }
}

/// The denoiser.
#[derive(Debug, Clone)]
pub struct UDiT<T: Real> {
    cfg: UDiTConfig,
    time: TimestepEmbedder<T>,
    stem: Vec<StemStage<T>>,
    stem_proj: Conv2d<T>,
    blocks: Vec<DitBlock<T>>,
    final_layer: FinalLayer<T>,
    head: Vec<HeadStage<T>>,
}

pub struct ModelCache<T: Real> {
    time: TimestepCache<T>,
    stem: Vec<StemStageCache<T>>,
    stem_proj: Conv2dCache<T>,
    blocks: Vec<DitBlockCache<T>>,
    final_layer: FinalLayerCache<T>,
    head: Vec<HeadStageCache<T>>,
    batch: usize,
    token_grid: (usize, usize),
}

/// Cache for the truncated forward pass ending at a trunk tap.
pub struct TapCache<T: Real> {
    time: TimestepCache<T>,
    stem: Vec<StemStageCache<T>>,
    stem_proj: Conv2dCache<T>,
    blocks: Vec<DitBlockCache<T>>,
    batch: usize,
    token_grid: (usize, usize),
}

/// Deterministically build a model from the config and seed.
pub fn build_model<T: Real>(cfg: &UDiTConfig, seed: u64) -> Result<UDiT<T>> {
    cfg.validate()?;
    let mut rng = derive(seed, Stream::Init, 0);
    let d = cfg.trunk_width;

    let time = TimestepEmbedder::init(cfg.time_embed_dim, &mut rng);
    let mut stem = Vec::new();
    let mut prev = cfg.in_channels;
    for &c in &cfg.stem_channels {
        stem.push(StemStage {
            conv: Conv2d::init(prev, c, 3, 2, 1, &mut rng),
            norm: GroupNorm::new(c),
        });
        prev = c;
    }
    let s_last = *cfg.stem_channels.last().unwrap();
    let stem_proj = Conv2d::init(s_last, d, 1, 1, 0, &mut rng);

    let blocks = (0..cfg.trunk_depth)
        .map(|_| DitBlock::init(d, cfg.heads, cfg.time_embed_dim, &mut rng))
        .collect();
    let final_layer = FinalLayer::init(d, s_last, cfg.time_embed_dim, &mut rng);

    let mut head = Vec::new();
    let mut chans: Vec<usize> = cfg.stem_channels.clone();
    chans.reverse();
    for w in chans.windows(2) {
        head.push(HeadStage {
            conv: ConvTranspose2d::init(w[0], w[1], 4, 2, 1, &mut rng),
            norm: Some(GroupNorm::new(w[1])),
        });
    }
    let out_conv = if cfg.head_zero_init {
        ConvTranspose2d::zeros(chans[chans.len() - 1], cfg.in_channels, 4, 2, 1)
    } else {
        ConvTranspose2d::init(chans[chans.len() - 1], cfg.in_channels, 4, 2, 1, &mut rng)
    };
    head.push(HeadStage {
        conv: out_conv,
        norm: None,
    });

    Ok(UDiT {
        cfg: cfg.clone(),
        time,
        stem,
        stem_proj,
        blocks,
        final_layer,
        head,
    })
}

impl<T: Real> UDiT<T> {
    pub fn config(&self) -> &UDiTConfig {
        &self.cfg
    }

    fn check_input(&self, xt: &Array4<T>, t: &Array1<f64>) -> Result<()> {
        let (b, c, h, w) = xt.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        let f = self.cfg.down_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} must be divisible by down_factor {f}"
            )));
        }
        if t.len() != b {
            return Err(Error::Shape(format!(
                "t has {} entries for batch of {b}",
                t.len()
            )));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("timestep {bad} outside [0, 1]")));
        }
        Ok(())
    }

    /// Full denoising pass with the cache needed for [`UDiT::backward`].
    pub fn forward_train(
        &self,
        xt: &Array4<T>,
        t: &Array1<f64>,
    ) -> Result<(Array4<T>, ModelCache<T>)> {
        self.check_input(xt, t)?;
        let (b, _, hh, ww) = xt.dim();
        let (t_emb, time_cache) = self.time.forward(t);

        let mut h = xt.clone();
        let mut stem_caches = Vec::with_capacity(self.stem.len());
        for stage in &self.stem {
            let (next, cache) = stage.forward(&h);
            stem_caches.push(cache);
            h = next;
        }
        let (h, proj_cache) = self.stem_proj.forward(&h);
        let (th, tw) = (hh / self.cfg.down_factor, ww / self.cfg.down_factor);
        let n = th * tw;

        let mut tokens = to_channel_last(&h); // (B*N, D)
        let pos = posembed::grid_2d::<T>(th, tw, self.cfg.trunk_width);
        for bi in 0..b {
            let mut rows = tokens.slice_mut(s![bi * n..(bi + 1) * n, ..]);
            rows += &pos;
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (next, cache) = blk.forward(&tokens, &t_emb, b, n);
            block_caches.push(cache);
            tokens = next;
        }
        let (tokens_out, final_cache) = self.final_layer.forward(&tokens, &t_emb, n);
        let mut hu = from_channel_last(tokens_out, b, th, tw);

        let mut head_caches = Vec::with_capacity(self.head.len());
        for stage in &self.head {
            let (next, cache) = stage.forward(&hu);
            head_caches.push(cache);
            hu = next;
        }
        Ok((
            hu,
            ModelCache {
                time: time_cache,
                stem: stem_caches,
                stem_proj: proj_cache,
                blocks: block_caches,
                final_layer: final_cache,
                head: head_caches,
                batch: b,
                token_grid: (th, tw),
            },
        ))
    }

    /// Eval-mode forward; deterministic, no cache kept.
    pub fn forward(&self, xt: &Array4<T>, t: &Array1<f64>) -> Result<Array4<T>> {
        Ok(self.forward_train(xt, t)?.0)
    }

    /// Backpropagate `dout` through the whole model. Returns parameter
    /// gradients and the input gradient.
    pub fn backward(&self, cache: &ModelCache<T>, dout: &Array4<T>) -> (Gradients<T>, Array4<T>) {
        let mut grads = Gradients::new();
        let (th, tw) = cache.token_grid;
        let b = cache.batch;

        let mut dh = dout.clone();
        for (i, (stage, sc)) in self.head.iter().zip(cache.head.iter()).enumerate().rev() {
            dh = stage.backward(&format!("head.{i}"), sc, &dh, &mut grads);
        }
        let dtokens_out = to_channel_last(&dh);
        let (mut dtokens, mut dt_emb) =
            self.final_layer
                .backward("final", &cache.final_layer, &dtokens_out, &mut grads);
        for (i, (blk, bc)) in self.blocks.iter().zip(cache.blocks.iter()).enumerate().rev() {
            let (dx, dt) = blk.backward(&format!("blocks.{i}"), bc, &dtokens, &mut grads);
            dtokens = dx;
            dt_emb.zip_mut_with(&dt, |a, v| *a += *v);
        }
        // positional embedding is fixed: gradient passes through the add
        let dh = from_channel_last(dtokens, b, th, tw);
        let dh = self
            .stem_proj
            .backward("stem_proj", &cache.stem_proj, &dh, &mut grads);
        let mut dh = dh;
        for (i, (stage, sc)) in self.stem.iter().zip(cache.stem.iter()).enumerate().rev() {
            dh = stage.backward(&format!("stem.{i}"), sc, &dh, &mut grads);
        }
        self.time.backward("time", &cache.time, &dt_emb, &mut grads);
        (grads, dh)
    }

    /// Stem output as a token grid `B x th x tw x D`, before positional
    /// embedding and trunk blocks.
    pub fn stem_tokens(&self, xt: &Array4<T>) -> Result<Array4<T>> {
        let (b, _, hh, ww) = xt.dim();
        let f = self.cfg.down_factor;
        if hh % f != 0 || ww % f != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {hh}x{ww} must be divisible by down_factor {f}"
            )));
        }
        let mut h = xt.clone();
        for stage in &self.stem {
            h = stage.forward(&h).0;
        }
        let h = self.stem_proj.forward(&h).0;
        let (th, tw) = (hh / f, ww / f);
        let tokens = to_channel_last(&h);
        Ok(tokens
            .into_shape_with_order((b, th, tw, self.cfg.trunk_width))
            .expect("token grid reshape"))
    }

    /// Token activations at a trunk block, as a `B x th x tw x D` grid.
    pub fn extract_features(
        &self,
        xt: &Array4<T>,
        t: &Array1<f64>,
        tap: Option<usize>,
    ) -> Result<Array4<T>> {
        self.check_input(xt, t)?;
        let tap = tap.unwrap_or(self.cfg.feature_tap_layer);
        if tap >= self.cfg.trunk_depth {
            return Err(Error::Argument(format!(
                "tap layer {tap} out of range for trunk_depth {}",
                self.cfg.trunk_depth
            )));
        }
        let (b, _, hh, ww) = xt.dim();
        let (t_emb, _) = self.time.forward(t);
        let mut h = xt.clone();
        for stage in &self.stem {
            h = stage.forward(&h).0;
        }
        let h = self.stem_proj.forward(&h).0;
        let (th, tw) = (hh / self.cfg.down_factor, ww / self.cfg.down_factor);
        let n = th * tw;
        let mut tokens = to_channel_last(&h);
        let pos = posembed::grid_2d::<T>(th, tw, self.cfg.trunk_width);
        for bi in 0..b {
            let mut rows = tokens.slice_mut(s![bi * n..(bi + 1) * n, ..]);
            rows += &pos;
        }
        for blk in self.blocks.iter().take(tap + 1) {
            tokens = blk.forward(&tokens, &t_emb, b, n).0;
        }
        let d = self.cfg.trunk_width;
        Ok(tokens
            .into_shape_with_order((b, th, tw, d))
            .expect("token grid reshape"))
    }

    /// [`UDiT::extract_features`] with the cache needed to backpropagate a
    /// feature-level loss into the backbone (full fine-tuning mode).
    pub fn extract_features_train(
        &self,
        xt: &Array4<T>,
        t: &Array1<f64>,
        tap: Option<usize>,
    ) -> Result<(Array4<T>, TapCache<T>)> {
        self.check_input(xt, t)?;
        let tap = tap.unwrap_or(self.cfg.feature_tap_layer);
        if tap >= self.cfg.trunk_depth {
            return Err(Error::Argument(format!(
                "tap layer {tap} out of range for trunk_depth {}",
                self.cfg.trunk_depth
            )));
        }
        let (b, _, hh, ww) = xt.dim();
        let (t_emb, time_cache) = self.time.forward(t);
        let mut h = xt.clone();
        let mut stem_caches = Vec::with_capacity(self.stem.len());
        for stage in &self.stem {
            let (next, cache) = stage.forward(&h);
            stem_caches.push(cache);
            h = next;
        }
        let (h, proj_cache) = self.stem_proj.forward(&h);
        let (th, tw) = (hh / self.cfg.down_factor, ww / self.cfg.down_factor);
        let n = th * tw;
        let mut tokens = to_channel_last(&h);
        let pos = posembed::grid_2d::<T>(th, tw, self.cfg.trunk_width);
        for bi in 0..b {
            let mut rows = tokens.slice_mut(s![bi * n..(bi + 1) * n, ..]);
            rows += &pos;
        }
        let mut block_caches = Vec::with_capacity(tap + 1);
        for blk in self.blocks.iter().take(tap + 1) {
            let (next, cache) = blk.forward(&tokens, &t_emb, b, n);
            block_caches.push(cache);
            tokens = next;
        }
        let d = self.cfg.trunk_width;
        let feats = tokens
            .into_shape_with_order((b, th, tw, d))
            .expect("token grid reshape");
        Ok((
            feats,
            TapCache {
                time: time_cache,
                stem: stem_caches,
                stem_proj: proj_cache,
                blocks: block_caches,
                batch: b,
                token_grid: (th, tw),
            },
        ))
    }

    /// Backpropagate a gradient on tap features (`B x th x tw x D`) into
    /// gradients for every backbone tensor on the path to the tap.
    pub fn backward_from_features(
        &self,
        cache: &TapCache<T>,
        dfeat: &Array4<T>,
    ) -> Gradients<T> {
        let mut grads = Gradients::new();
        let (b, th, tw, d) = dfeat.dim();
        debug_assert_eq!(b, cache.batch);
        debug_assert_eq!((th, tw), cache.token_grid);
        let mut dtokens = dfeat
            .to_owned()
            .into_shape_with_order((b * th * tw, d))
            .expect("token grad reshape");
        let te = self.cfg.time_embed_dim;
        let mut dt_emb = ndarray::Array2::<T>::zeros((b, te));
        for (i, bc) in cache.blocks.iter().enumerate().rev() {
            let (dx, dt) = self.blocks[i].backward(&format!("blocks.{i}"), bc, &dtokens, &mut grads);
            dtokens = dx;
            dt_emb.zip_mut_with(&dt, |a, v| *a += *v);
        }
        let dh = from_channel_last(dtokens, b, th, tw);
        let mut dh = self
            .stem_proj
            .backward("stem_proj", &cache.stem_proj, &dh, &mut grads);
        for (i, (stage, sc)) in self.stem.iter().zip(cache.stem.iter()).enumerate().rev() {
            dh = stage.backward(&format!("stem.{i}"), sc, &dh, &mut grads);
        }
        self.time.backward("time", &cache.time, &dt_emb, &mut grads);
        grads
    }

    /// Exact number of scalar weights.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.for_each_param(&mut |_, v| total += v.len());
        total
    }

    /// Visit every parameter in a fixed deterministic order.
    /// Keep in sync with [`UDiT::for_each_param_mut`].
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f("time.fc1.weight", self.time.fc1.weight.view().into_dyn());
        f("time.fc1.bias", self.time.fc1.bias.view().into_dyn());
        f("time.fc2.weight", self.time.fc2.weight.view().into_dyn());
        f("time.fc2.bias", self.time.fc2.bias.view().into_dyn());
        for (i, st) in self.stem.iter().enumerate() {
            f(&format!("stem.{i}.conv.weight"), st.conv.weight.view().into_dyn());
            f(&format!("stem.{i}.conv.bias"), st.conv.bias.view().into_dyn());
            f(&format!("stem.{i}.norm.gamma"), st.norm.gamma.view().into_dyn());
            f(&format!("stem.{i}.norm.beta"), st.norm.beta.view().into_dyn());
        }
        f("stem_proj.weight", self.stem_proj.weight.view().into_dyn());
        f("stem_proj.bias", self.stem_proj.bias.view().into_dyn());
        for (i, blk) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.attn.qkv.weight"), blk.attn.qkv.weight.view().into_dyn());
            f(&format!("blocks.{i}.attn.qkv.bias"), blk.attn.qkv.bias.view().into_dyn());
            f(&format!("blocks.{i}.attn.proj.weight"), blk.attn.proj.weight.view().into_dyn());
            f(&format!("blocks.{i}.attn.proj.bias"), blk.attn.proj.bias.view().into_dyn());
            f(&format!("blocks.{i}.mlp.fc1.weight"), blk.mlp.fc1.weight.view().into_dyn());
            f(&format!("blocks.{i}.mlp.fc1.bias"), blk.mlp.fc1.bias.view().into_dyn());
            f(&format!("blocks.{i}.mlp.fc2.weight"), blk.mlp.fc2.weight.view().into_dyn());
            f(&format!("blocks.{i}.mlp.fc2.bias"), blk.mlp.fc2.bias.view().into_dyn());
            f(&format!("blocks.{i}.ada.weight"), blk.ada.weight.view().into_dyn());
            f(&format!("blocks.{i}.ada.bias"), blk.ada.bias.view().into_dyn());
        }
        f("final.ada.weight", self.final_layer.ada.weight.view().into_dyn());
        f("final.ada.bias", self.final_layer.ada.bias.view().into_dyn());
        f("final.proj.weight", self.final_layer.proj.weight.view().into_dyn());
        f("final.proj.bias", self.final_layer.proj.bias.view().into_dyn());
        for (i, st) in self.head.iter().enumerate() {
            f(&format!("head.{i}.conv.weight"), st.conv.weight.view().into_dyn());
            f(&format!("head.{i}.conv.bias"), st.conv.bias.view().into_dyn());
            if let Some(norm) = &st.norm {
                f(&format!("head.{i}.norm.gamma"), norm.gamma.view().into_dyn());
                f(&format!("head.{i}.norm.beta"), norm.beta.view().into_dyn());
            }
        }
    }

    /// Mutable variant of [`UDiT::for_each_param`]; same names, same order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f("time.fc1.weight", self.time.fc1.weight.view_mut().into_dyn());
        f("time.fc1.bias", self.time.fc1.bias.view_mut().into_dyn());
        f("time.fc2.weight", self.time.fc2.weight.view_mut().into_dyn());
        f("time.fc2.bias", self.time.fc2.bias.view_mut().into_dyn());
        for (i, st) in self.stem.iter_mut().enumerate() {
            f(&format!("stem.{i}.conv.weight"), st.conv.weight.view_mut().into_dyn());
            f(&format!("stem.{i}.conv.bias"), st.conv.bias.view_mut().into_dyn());
            f(&format!("stem.{i}.norm.gamma"), st.norm.gamma.view_mut().into_dyn());
            f(&format!("stem.{i}.norm.beta"), st.norm.beta.view_mut().into_dyn());
        }
        f("stem_proj.weight", self.stem_proj.weight.view_mut().into_dyn());
        f("stem_proj.bias", self.stem_proj.bias.view_mut().into_dyn());
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.attn.qkv.weight"), blk.attn.qkv.weight.view_mut().into_dyn());
            f(&format!("blocks.{i}.attn.qkv.bias"), blk.attn.qkv.bias.view_mut().into_dyn());
            f(&format!("blocks.{i}.attn.proj.weight"), blk.attn.proj.weight.view_mut().into_dyn());
            f(&format!("blocks.{i}.attn.proj.bias"), blk.attn.proj.bias.view_mut().into_dyn());
            f(&format!("blocks.{i}.mlp.fc1.weight"), blk.mlp.fc1.weight.view_mut().into_dyn());
            f(&format!("blocks.{i}.mlp.fc1.bias"), blk.mlp.fc1.bias.view_mut().into_dyn());
            f(&format!("blocks.{i}.mlp.fc2.weight"), blk.mlp.fc2.weight.view_mut().into_dyn());
            f(&format!("blocks.{i}.mlp.fc2.bias"), blk.mlp.fc2.bias.view_mut().into_dyn());
            f(&format!("blocks.{i}.ada.weight"), blk.ada.weight.view_mut().into_dyn());
            f(&format!("blocks.{i}.ada.bias"), blk.ada.bias.view_mut().into_dyn());
        }
        f("final.ada.weight", self.final_layer.ada.weight.view_mut().into_dyn());
        f("final.ada.bias", self.final_layer.ada.bias.view_mut().into_dyn());
        f("final.proj.weight", self.final_layer.proj.weight.view_mut().into_dyn());
        f("final.proj.bias", self.final_layer.proj.bias.view_mut().into_dyn());
        for (i, st) in self.head.iter_mut().enumerate() {
            f(&format!("head.{i}.conv.weight"), st.conv.weight.view_mut().into_dyn());
            f(&format!("head.{i}.conv.bias"), st.conv.bias.view_mut().into_dyn());
            if let Some(norm) = &mut st.norm {
                f(&format!("head.{i}.norm.gamma"), norm.gamma.view_mut().into_dyn());
                f(&format!("head.{i}.norm.beta"), norm.beta.view_mut().into_dyn());
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// FNV-1a checksum over names and element bit patterns; used by tests to
    /// assert frozen-backbone contracts.
    pub fn weight_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        };
        self.for_each_param(&mut |name, view| {
            for b in name.as_bytes() {
                mix(*b);
            }
            for v in view.iter() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    mix(b);
                }
            }
        });
        hash
    }

    /// Add N(0, sigma) noise to every parameter (gradient checks and
    /// conditioning-sensitivity tests need all paths live).
    pub fn perturb_weights(&mut self, seed: u64, sigma: f64) {
        let mut rng = derive(seed, Stream::Init, 1);
        self.for_each_param_mut(&mut |_, mut view| {
            for v in view.iter_mut() {
                *v += T::from_f64(sigma * rng.sample::<f64, _>(StandardNormal));
            }
        });
    }

    /// Architecture description for structural assertions.
    pub fn graph(&self) -> Vec<OpDesc> {
        let mut ops = Vec::new();
        let push = |ops: &mut Vec<OpDesc>, kind, name: String, spatial| {
            ops.push(OpDesc {
                kind,
                name,
                spatial,
                channels_to_spatial: false,
            });
        };
        push(&mut ops, OpKind::TimestepEmbed, "time".into(), SpatialEffect::Same);
        for i in 0..self.stem.len() {
            push(&mut ops, OpKind::Conv, format!("stem.{i}.conv"), SpatialEffect::Down(2));
            push(&mut ops, OpKind::GroupNorm, format!("stem.{i}.norm"), SpatialEffect::Same);
            push(&mut ops, OpKind::Activation, format!("stem.{i}.act"), SpatialEffect::Same);
        }
        push(&mut ops, OpKind::Conv, "stem_proj".into(), SpatialEffect::Same);
        push(&mut ops, OpKind::TokenFlatten, "tokens".into(), SpatialEffect::Same);
        push(&mut ops, OpKind::PosEmbed, "pos".into(), SpatialEffect::Same);
        for i in 0..self.blocks.len() {
            push(&mut ops, OpKind::LayerNorm, format!("blocks.{i}.ln1"), SpatialEffect::Same);
            push(&mut ops, OpKind::AdaModulation, format!("blocks.{i}.mod1"), SpatialEffect::Same);
            push(&mut ops, OpKind::Attention, format!("blocks.{i}.attn"), SpatialEffect::Same);
            push(&mut ops, OpKind::Residual, format!("blocks.{i}.res1"), SpatialEffect::Same);
            push(&mut ops, OpKind::LayerNorm, format!("blocks.{i}.ln2"), SpatialEffect::Same);
            push(&mut ops, OpKind::AdaModulation, format!("blocks.{i}.mod2"), SpatialEffect::Same);
            push(&mut ops, OpKind::Mlp, format!("blocks.{i}.mlp"), SpatialEffect::Same);
            push(&mut ops, OpKind::Residual, format!("blocks.{i}.res2"), SpatialEffect::Same);
        }
        push(&mut ops, OpKind::LayerNorm, "final.ln".into(), SpatialEffect::Same);
        push(&mut ops, OpKind::AdaModulation, "final.mod".into(), SpatialEffect::Same);
        push(&mut ops, OpKind::Conv, "final.proj".into(), SpatialEffect::Same);
        push(&mut ops, OpKind::TokenUnflatten, "untokens".into(), SpatialEffect::Same);
        for i in 0..self.head.len() {
            push(
                &mut ops,
                OpKind::ConvTranspose,
                format!("head.{i}.conv"),
                SpatialEffect::Up(2),
            );
            if self.head[i].norm.is_some() {
                push(&mut ops, OpKind::GroupNorm, format!("head.{i}.norm"), SpatialEffect::Same);
                push(&mut ops, OpKind::Activation, format!("head.{i}.act"), SpatialEffect::Same);
            }
        }
        ops
    }
}

/// One node of the architecture description.
#[derive(Debug, Clone)]
pub struct OpDesc {
    pub kind: OpKind,
    pub name: String,
    pub spatial: SpatialEffect,
    /// True only for ops that reshape token channels into pixels
    /// (unpatchify-style); the architecture never constructs one.
    pub channels_to_spatial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv,
    ConvTranspose,
    GroupNorm,
    LayerNorm,
    Activation,
    Attention,
    Mlp,
    AdaModulation,
    Residual,
    TimestepEmbed,
    PosEmbed,
    TokenFlatten,
    TokenUnflatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialEffect {
    Same,
    Down(usize),
    Up(usize),
}

impl FeatureSource for UDiT<f32> {
    fn feature_dim(&self) -> usize {
        self.cfg.trunk_width
    }

    fn downsample_factor(&self) -> usize {
        self.cfg.down_factor
    }

    fn extract(&self, xt: &Array4<f32>, t: f64) -> Result<Array4<f32>> {
        let tv = Array1::from_elem(xt.dim().0, t);
        self.extract_features(xt, &tv, None)
    }
}

/// Post-head pixel features: the literal "final output features" reading.
/// Wraps a model so probes can consume the denoiser output itself.
pub struct HeadFeatures<'a>(pub &'a UDiT<f32>);

impl FeatureSource for HeadFeatures<'_> {
    fn feature_dim(&self) -> usize {
        self.0.cfg.in_channels
    }

    fn downsample_factor(&self) -> usize {
        1
    }

    fn extract(&self, xt: &Array4<f32>, t: f64) -> Result<Array4<f32>> {
        let tv = Array1::from_elem(xt.dim().0, t);
        let out = self.0.forward(xt, &tv)?; // (B, C, H, W)
        let (b, c, h, w) = out.dim();
        let moved = out.view().permuted_axes([0, 2, 3, 1]);
        Ok(moved
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, h, w, c))
            .expect("channel-last reshape"))
    }
}

pub use posembed::grid_2d as positional_grid;
