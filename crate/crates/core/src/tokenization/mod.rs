//! Images to token sequences under three locality regimes (pixel, patch,
//! permuted patch), position embeddings, and the distance-bounded pixel
//! permutations used to corrupt locality.

mod permutation;
mod position;

pub use permutation::{generate_permutation, DeltaBound, PermutationMap};
pub use position::{sincos2d, PeMode, PositionEmbeddingSpec};

use crate::numerics::{NumericsError, Tensor};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizationError {
    #[error("patch size {p} does not divide image {h}x{w}")]
    NonDivisible { p: usize, h: usize, w: usize },
    #[error("swap count {t} exceeds capacity {capacity} ({h}x{w} grid)")]
    TooManySwaps { t: usize, capacity: usize, h: usize, w: usize },
    #[error("distance threshold must be >= 2 or unbounded, got {0}")]
    BadDelta(u32),
    #[error("rejection budget exhausted after {attempts} attempts: placed {found} of {needed} swaps (delta {delta})")]
    SwapBudgetExhausted { needed: usize, found: usize, attempts: usize, delta: DeltaBound },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("permutation file, line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("image must be normalized before tokenization")]
    ImageNotNormalized,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-channel normalization: byte / 255, then (v - mean) / std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// CIFAR-lineage default statistics.
    pub fn cifar() -> Self {
        NormStats { mean: [0.5071, 0.4865, 0.4409], std: [0.2673, 0.2564, 0.2762] }
    }

    /// Plain [0,1] scaling.
    pub fn unit() -> Self {
        NormStats { mean: [0.0; 3], std: [1.0; 3] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PixelRange {
    /// Byte values 0..=255 stored as floats.
    RawBytes,
    Normalized(NormStats),
}

/// H×W×3 image, channels interleaved, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F: Real> {
    pub height: usize,
    pub width: usize,
    data: Vec<F>,
    pub range: PixelRange,
}

impl<F: Real> ImageTensor<F> {
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), height * width * 3, "byte buffer must be HxWx3");
        ImageTensor {
            height,
            width,
            data: bytes.iter().map(|&b| F::of_usize(b as usize)).collect(),
            range: PixelRange::RawBytes,
        }
    }

    pub fn from_data(
        height: usize,
        width: usize,
        data: Vec<F>,
        range: PixelRange,
    ) -> Result<Self, TokenizationError> {
        if data.len() != height * width * 3 {
            return Err(TokenizationError::InvalidPermutation(format!(
                "image data length {} for {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(ImageTensor { height, width, data, range })
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [F; 3] {
        let base = (row * self.width + col) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, v: [F; 3]) {
        let base = (row * self.width + col) * 3;
        self.data[base..base + 3].copy_from_slice(&v);
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn normalize(&self, stats: NormStats) -> ImageTensor<F> {
        debug_assert!(matches!(self.range, PixelRange::RawBytes));
        let scale = F::of_f64(1.0 / 255.0);
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            let c = i % 3;
            let mean = F::of_f64(stats.mean[c]);
            let std = F::of_f64(stats.std[c]);
            data.push((v * scale - mean) / std);
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
            range: PixelRange::Normalized(stats),
        }
    }

    /// Inverse of [`normalize`]; rounds back to whole byte values.
    pub fn denormalize(&self) -> ImageTensor<F> {
        let stats = match &self.range {
            PixelRange::Normalized(s) => *s,
            PixelRange::RawBytes => return self.clone(),
        };
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &v) in self.data.iter().enumerate() {
            let c = i % 3;
            let mean = F::of_f64(stats.mean[c]);
            let std = F::of_f64(stats.std[c]);
            let byte = ((v * std + mean) * F::of_f64(255.0)).round();
            data.push(byte.max(F::zero()).min(F::of_f64(255.0)));
        }
        ImageTensor { height: self.height, width: self.width, data, range: PixelRange::RawBytes }
    }

    /// Moves the pixel at flat index `i` to `mapping(i)`.
    pub fn apply_permutation(&self, perm: &PermutationMap) -> Result<ImageTensor<F>, TokenizationError> {
        if perm.size() != self.num_pixels() {
            return Err(TokenizationError::InvalidPermutation(format!(
                "permutation over {} pixels applied to {}x{} image",
                perm.size(),
                self.height,
                self.width
            )));
        }
        let mut data = vec![F::zero(); self.data.len()];
        for (i, &dst) in perm.mapping().iter().enumerate() {
            data[dst * 3..dst * 3 + 3].copy_from_slice(&self.data[i * 3..i * 3 + 3]);
        }
        Ok(ImageTensor {
            height: self.height,
            width: self.width,
            data,
            range: self.range.clone(),
        })
    }
}

/// Token activations plus the grid coordinate each token came from.
/// Coordinates are pixel-center (row, col); the cls slot has none.
#[derive(Debug, Clone)]
pub struct TokenSequence<F: Real> {
    pub tokens: Tensor<F>,
    pub coords: Vec<Option<(f64, f64)>>,
    pub has_cls: bool,
}

impl<F: Real> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Number of grid (non-cls) tokens.
    pub fn grid_len(&self) -> usize {
        self.len() - usize::from(self.has_cls)
    }
}

/// Raster-order pixel extraction: `[H*W, 3]` rows plus (row, col) coords.
pub fn extract_pixels<F: Real>(img: &ImageTensor<F>) -> (Vec<F>, Vec<(f64, f64)>) {
    let mut coords = Vec::with_capacity(img.num_pixels());
    for r in 0..img.height {
        for c in 0..img.width {
            coords.push((r as f64, c as f64));
        }
    }
    (img.data().to_vec(), coords)
}

/// Raster-order patch extraction: each row is the flattened p×p×3 patch
/// (raster order within the patch, channels interleaved last). Coordinates
/// are patch centers in pixels.
pub fn extract_patches<F: Real>(
    img: &ImageTensor<F>,
    p: usize,
) -> Result<(Vec<F>, Vec<(f64, f64)>), TokenizationError> {
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(TokenizationError::NonDivisible { p, h: img.height, w: img.width });
    }
    let (gh, gw) = (img.height / p, img.width / p);
    let mut out = Vec::with_capacity(img.num_pixels() * 3);
    let mut coords = Vec::with_capacity(gh * gw);
    let half = (p as f64 - 1.0) / 2.0;
    for pr in 0..gh {
        for pc in 0..gw {
            for dr in 0..p {
                for dc in 0..p {
                    let px = img.pixel(pr * p + dr, pc * p + dc);
                    out.extend_from_slice(&px);
                }
            }
            coords.push((pr as f64 * p as f64 + half, pc as f64 * p as f64 + half));
        }
    }
    Ok((out, coords))
}

fn embed_tokens<F: Real>(
    raw: Vec<F>,
    coords: Vec<(f64, f64)>,
    token_dim: usize,
    proj_w: &Tensor<F>,
    proj_b: &Tensor<F>,
    pe_table: Option<&Tensor<F>>,
    cls: Option<&Tensor<F>>,
) -> Result<TokenSequence<F>, TokenizationError> {
    let l = coords.len();
    let raw_t = Tensor::from_vec(vec![l, token_dim], raw)?;
    let projected = raw_t.matmul2d(proj_w)?;
    let d = proj_w.shape()[1];
    let has_cls = cls.is_some();
    let l_out = l + usize::from(has_cls);
    let mut data = Vec::with_capacity(l_out * d);
    if let Some(c) = cls {
        data.extend_from_slice(c.data());
    }
    for row in projected.data().chunks(d) {
        for (j, &v) in row.iter().enumerate() {
            data.push(v + proj_b.data()[j]);
        }
    }
    if let Some(pe) = pe_table {
        if pe.shape() != [l_out, d] {
            return Err(TokenizationError::Numerics(NumericsError::shape(
                "tokenize",
                format!("PE table {:?} for {} tokens of dim {}", pe.shape(), l_out, d),
            )));
        }
        for (v, &p) in data.iter_mut().zip(pe.data()) {
            *v = *v + p;
        }
    }
    let mut out_coords: Vec<Option<(f64, f64)>> = Vec::with_capacity(l_out);
    if has_cls {
        out_coords.push(None);
    }
    out_coords.extend(coords.into_iter().map(Some));
    Ok(TokenSequence {
        tokens: Tensor::from_vec(vec![l_out, d], data)?,
        coords: out_coords,
        has_cls,
    })
}

/// One token per pixel: `X = [cls, f(p_1), ..., f(p_L)] + PE`, L = H·W.
pub fn pixel_tokenize<F: Real>(
    img: &ImageTensor<F>,
    proj_w: &Tensor<F>,
    proj_b: &Tensor<F>,
    pe_table: Option<&Tensor<F>>,
    cls: Option<&Tensor<F>>,
) -> Result<TokenSequence<F>, TokenizationError> {
    if !matches!(img.range, PixelRange::Normalized(_)) {
        return Err(TokenizationError::ImageNotNormalized);
    }
    let (raw, coords) = extract_pixels(img);
    embed_tokens(raw, coords, 3, proj_w, proj_b, pe_table, cls)
}

/// One token per p×p patch: (H/p)·(W/p) tokens of 3p² values each.
pub fn patchify<F: Real>(
    img: &ImageTensor<F>,
    p: usize,
    proj_w: &Tensor<F>,
    proj_b: &Tensor<F>,
    pe_table: Option<&Tensor<F>>,
    cls: Option<&Tensor<F>>,
) -> Result<TokenSequence<F>, TokenizationError> {
    if !matches!(img.range, PixelRange::Normalized(_)) {
        return Err(TokenizationError::ImageNotNormalized);
    }
    let (raw, coords) = extract_patches(img, p)?;
    embed_tokens(raw, coords, 3 * p * p, proj_w, proj_b, pe_table, cls)
}

#[cfg(test)]
mod tests;
