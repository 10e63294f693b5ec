//! Palette-constrained pixel-art synthesis by score distillation.
//!
//! A categorical generator holds one logit per pixel and palette element.
//! Each optimization step renders a Gumbel-softmax blend of palette tiles,
//! augments it, asks a guidance backend for noise and semantic gradients,
//! and pulls those back to the logits together with an FFT smoothness loss.
//! The final image is the per-pixel argmax, so every output pixel is exactly
//! a palette color or tile.

pub mod augment;
pub mod cli;
pub mod error;
pub mod export;
pub mod generator;
pub mod gradcheck;
pub mod guidance;
pub mod imaging;
pub mod loss;
pub mod optimize;
pub mod palette;
pub mod rng;

pub use error::{Error, Result};
