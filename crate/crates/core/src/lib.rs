//! Desk-scale pixel-space diffusion pre-training for representation learning.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`diffusion`] — forward corruption process, regression targets, loss weighting
//! - [`nn`] — minimal tensor layers with explicit forward/backward passes
//! - [`model`] — the UDiT denoiser: conv stem, transformer trunk, conv head
//! - [`erank`] — effective-rank based timestep selection
//! - [`curation`] — three-stage dataset filtration
//! - [`train`] — denoising pre-training loop, checkpoints, budget estimation
//! - [`probe`] — frozen-feature segmentation probing, mIoU, PCA visualization
//! - [`formats`] — binary/text artifact formats (SPRF features, grid specs)
//! - [`data`] — image directory loading and normalization
//! - [`synth`] — synthetic two-texture corpora for end-to-end checks


pub mod curation;
pub mod data;
pub mod diffusion;
pub mod erank;
pub mod error;
pub mod formats;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
