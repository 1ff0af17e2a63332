//! Augmentations over raw byte images (crop/flip/RandAug) and over
//! normalized batches (MixUp/CutMix).

use super::{AugmentationConfig, Batch};
use crate::scalar::Real;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

/// Reduced RandAugment: `num_ops` draws from an 8-op pool (rotate,
/// translate x/y, shear x/y, brightness, contrast, solarize), each applied
/// at `magnitude` (0..10 scale) jittered by `mag_std`. The paper string
/// "(9, 0.5)" is magnitude 9 with jitter 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandAugConfig {
    pub magnitude: f64,
    pub mag_std: f64,
    pub num_ops: usize,
}

/// Pad-then-random-crop at the original size, horizontal flip, RandAug.
/// Deterministic under the caller-provided stream; identity when all
/// switches are off.
pub fn basic_augment(
    img: &[u8],
    h: usize,
    w: usize,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Vec<u8> {
    let mut out = img.to_vec();
    if let Some(pad) = cfg.random_crop_padding {
        out = pad_crop(&out, h, w, pad, rng);
    }
    if cfg.hflip_prob > 0.0 && rng.gen::<f64>() < cfg.hflip_prob {
        out = hflip(&out, h, w);
    }
    if let Some(ra) = &cfg.randaug {
        out = randaug(&out, h, w, ra, rng);
    }
    out
}

pub fn hflip(img: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; img.len()];
    for r in 0..h {
        for c in 0..w {
            let src = (r * w + c) * 3;
            let dst = (r * w + (w - 1 - c)) * 3;
            out[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
        }
    }
    out
}

fn pad_crop(img: &[u8], h: usize, w: usize, pad: usize, rng: &mut impl Rng) -> Vec<u8> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0u8; ph * pw * 3];
    for r in 0..h {
        let src = r * w * 3;
        let dst = ((r + pad) * pw + pad) * 3;
        padded[dst..dst + w * 3].copy_from_slice(&img[src..src + w * 3]);
    }
    let off_r = rng.gen_range(0..=2 * pad);
    let off_c = rng.gen_range(0..=2 * pad);
    let mut out = vec![0u8; h * w * 3];
    for r in 0..h {
        let src = ((r + off_r) * pw + off_c) * 3;
        let dst = r * w * 3;
        out[dst..dst + w * 3].copy_from_slice(&padded[src..src + w * 3]);
    }
    out
}

fn randaug(img: &[u8], h: usize, w: usize, cfg: &RandAugConfig, rng: &mut impl Rng) -> Vec<u8> {
    let mut out = img.to_vec();
    for _ in 0..cfg.num_ops {
        let op = rng.gen_range(0..8u8);
        let jitter: f64 = rng.gen_range(-cfg.mag_std..=cfg.mag_std);
        let mag = ((cfg.magnitude + jitter) / 10.0).clamp(0.0, 1.0);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        out = match op {
            0 => rotate(&out, h, w, sign * mag * 30.0f64.to_radians()),
            1 => translate(&out, h, w, (sign * mag * w as f64 * 0.45) as isize, 0),
            2 => translate(&out, h, w, 0, (sign * mag * h as f64 * 0.45) as isize),
            3 => shear(&out, h, w, sign * mag * 0.3, true),
            4 => shear(&out, h, w, sign * mag * 0.3, false),
            5 => brightness(&out, 1.0 + sign * mag * 0.6),
            6 => contrast(&out, 1.0 + sign * mag * 0.6),
            _ => solarize(&out, (255.0 * (1.0 - mag)) as u8),
        };
    }
    out
}

/// Inverse-mapped nearest-neighbor geometric warp about the image center.
fn warp(img: &[u8], h: usize, w: usize, inv: impl Fn(f64, f64) -> (f64, f64)) -> Vec<u8> {
    let mut out = vec![0u8; img.len()];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = inv(r as f64 - cy, c as f64 - cx);
            let (sy, sx) = (sy + cy, sx + cx);
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
                let src = (ry as usize * w + rx as usize) * 3;
                let dst = (r * w + c) * 3;
                out[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
            }
        }
    }
    out
}

fn rotate(img: &[u8], h: usize, w: usize, theta: f64) -> Vec<u8> {
    let (s, c) = theta.sin_cos();
    warp(img, h, w, |y, x| (c * y - s * x, s * y + c * x))
}

fn translate(img: &[u8], h: usize, w: usize, dx: isize, dy: isize) -> Vec<u8> {
    warp(img, h, w, |y, x| (y - dy as f64, x - dx as f64))
}

fn shear(img: &[u8], h: usize, w: usize, k: f64, horizontal: bool) -> Vec<u8> {
    if horizontal {
        warp(img, h, w, |y, x| (y, x - k * y))
    } else {
        warp(img, h, w, |y, x| (y - k * x, x))
    }
}

fn brightness(img: &[u8], factor: f64) -> Vec<u8> {
    img.iter().map(|&v| (v as f64 * factor).clamp(0.0, 255.0) as u8).collect()
}

fn contrast(img: &[u8], factor: f64) -> Vec<u8> {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    img.iter().map(|&v| (mean + (v as f64 - mean) * factor).clamp(0.0, 255.0) as u8).collect()
}

fn solarize(img: &[u8], threshold: u8) -> Vec<u8> {
    img.iter().map(|&v| if v >= threshold { 255 - v } else { v }).collect()
}

fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> f64 {
    if alpha <= 0.0 {
        return 1.0;
    }
    Beta::new(alpha, alpha).expect("alpha > 0").sample(rng)
}

/// MixUp: x ← λ·x_i + (1−λ)·x_j with the batch paired against its reverse,
/// labels mixed by the same λ, λ ~ Beta(α, α).
pub fn mixup<F: Real>(batch: &mut Batch<F>, alpha: f64, rng: &mut impl Rng) {
    let lambda = sample_lambda(alpha, rng);
    mixup_with_lambda(batch, lambda);
}

pub fn mixup_with_lambda<F: Real>(batch: &mut Batch<F>, lambda: f64) {
    if batch.len() < 2 || lambda >= 1.0 {
        return;
    }
    let lam = F::of_f64(lambda);
    let om = F::of_f64(1.0 - lambda);
    let b = batch.len();
    let originals: Vec<Vec<F>> = batch.images.iter().map(|i| i.data().to_vec()).collect();
    for i in 0..b {
        let j = b - 1 - i;
        let data: Vec<F> = originals[i]
            .iter()
            .zip(&originals[j])
            .map(|(&a, &o)| lam * a + om * o)
            .collect();
        let img = &mut batch.images[i];
        *img = crate::tokenization::ImageTensor::from_data(
            img.height,
            img.width,
            data,
            img.range.clone(),
        )
        .expect("same length");
    }
    mix_labels(batch, lambda);
}

fn mix_labels<F: Real>(batch: &mut Batch<F>, lambda: f64) {
    let lam = F::of_f64(lambda);
    let om = F::of_f64(1.0 - lambda);
    let b = batch.len();
    let c = batch.num_classes;
    let orig = batch.labels.clone();
    for i in 0..b {
        let j = b - 1 - i;
        for k in 0..c {
            batch.labels[i * c + k] = lam * orig[i * c + k] + om * orig[j * c + k];
        }
    }
}

/// CutMix: paste a rectangle from the reverse-paired image; λ is recomputed
/// from the clipped rectangle (1 − cut_area/total_area) before mixing labels.
pub fn cutmix<F: Real>(batch: &mut Batch<F>, alpha: f64, rng: &mut impl Rng) {
    let lambda = sample_lambda(alpha, rng);
    cutmix_with_lambda(batch, lambda, rng);
}

/// Returns the effective λ actually applied.
pub fn cutmix_with_lambda<F: Real>(
    batch: &mut Batch<F>,
    lambda: f64,
    rng: &mut impl Rng,
) -> f64 {
    if batch.len() < 2 || lambda >= 1.0 {
        return 1.0;
    }
    let (h, w) = (batch.images[0].height, batch.images[0].width);
    let cut_ratio = (1.0 - lambda).sqrt();
    let cut_h = (h as f64 * cut_ratio) as usize;
    let cut_w = (w as f64 * cut_ratio) as usize;
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    let r0 = cy.saturating_sub(cut_h / 2);
    let r1 = (cy + cut_h.div_ceil(2)).min(h);
    let c0 = cx.saturating_sub(cut_w / 2);
    let c1 = (cx + cut_w.div_ceil(2)).min(w);
    let area = (r1 - r0) * (c1 - c0);
    let effective = 1.0 - area as f64 / (h * w) as f64;
    let b = batch.len();
    let originals: Vec<Vec<F>> = batch.images.iter().map(|i| i.data().to_vec()).collect();
    for i in 0..b {
        let j = b - 1 - i;
        let img = &mut batch.images[i];
        let mut data = originals[i].clone();
        for r in r0..r1 {
            for c in c0..c1 {
                let base = (r * w + c) * 3;
                data[base..base + 3].copy_from_slice(&originals[j][base..base + 3]);
            }
        }
        *img = crate::tokenization::ImageTensor::from_data(h, w, data, img.range.clone())
            .expect("same length");
    }
    mix_labels(batch, effective);
    effective
}
