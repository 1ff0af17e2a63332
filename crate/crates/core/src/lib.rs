//! Desk-scale laboratory for pixel-token Transformers.
//!
//! The crate is organized around the question "is locality a necessary
//! inductive bias?": images can be tokenized per pixel, per patch, or per
//! patch after a distance-bounded pixel permutation, fed through a pre-norm
//! Transformer encoder (supervised or masked-autoencoding heads), and the
//! resulting attention maps analyzed for receptive-field statistics.
//!
//! Modules:
//! - [`numerics`]: minimal reverse-mode autodiff over dense tensors.
//! - [`tokenization`]: pixel/patch tokenizers, position embeddings, pixel
//!   permutations.
//! - [`model`]: the encoder, classification and MAE heads, size presets,
//!   checkpoint format.
//! - [`optim`]: AdamW, warmup+cosine schedule, layer-wise lr decay, EMA.
//! - [`data`]: CIFAR-100 binary / synthetic / raw-folder datasets and the
//!   augmentation pipeline.
//! - [`experiments`]: reproducible training harnesses and sweeps.
//! - [`analysis`]: mean attention distance/offset, query maps, figure export.
//!
//! All core math is generic over the scalar type via [`scalar::Real`]
//! (f32 or f64); training runs in f32, the f64 instantiation exists for
//! tighter gradient-check tolerances.

pub mod analysis;
pub mod data;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tokenization;

/// Default training precision.
pub type Scalar = f32;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Model32 = model::PixelTransformer<f32>;
pub type MaeModel32 = model::MaeAutoencoder<f32>;
