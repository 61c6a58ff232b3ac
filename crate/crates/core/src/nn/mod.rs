//! Minimal neural-network layers with explicit forward/backward passes.
//!
//! Every layer exposes `forward` (caching the values backward needs) and
//! `backward` (consuming the cache, producing parameter gradients and the
//! input gradient). Models are immutable during forward/backward; gradients
//! are accumulated into a name-keyed [`Gradients`] map so optimizers,
//! checkpoints, and EMA tracking all share one parameter addressing scheme.

mod act;
mod attention;
mod conv;
mod gradients;
mod linear;
mod norm;
mod real;

pub use act::{gelu, gelu_backward, silu, silu_backward};
pub use attention::{Attention, AttentionCache};
pub(crate) use conv::{from_channel_last, to_channel_last};
pub use conv::{Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
pub use gradients::Gradients;
pub use linear::{Linear, LinearCache};
pub use norm::{GroupNorm, GroupNormCache, LayerNorm, LayerNormCache};
pub use real::Real;
