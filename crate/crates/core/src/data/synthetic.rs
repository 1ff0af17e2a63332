//! Synthetic datasets with exactly computable labels.
//!
//! - `quadrant`: a bright blob sits fully inside one quadrant; the class is
//!   the quadrant index. Locality-sensitive: the label is a function of
//!   *where* bright pixels are.
//! - `color`: the class is the dominant color. Locality-insensitive: any
//!   pixel shuffle preserves the label.

use super::InMemoryDataset;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Quadrant,
    Color,
}

pub const SYNTHETIC_CLASSES: usize = 4;

/// Quadrant index of a pixel: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right.
pub fn quadrant_class(row: usize, col: usize, height: usize, width: usize) -> usize {
    let down = usize::from(row >= height / 2);
    let right = usize::from(col >= width / 2);
    down * 2 + right
}

pub fn synthetic_dataset(
    kind: SyntheticKind,
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> InMemoryDataset {
    assert!(height >= 4 && width >= 4, "synthetic images need at least a 4x4 grid");
    let mut rng = crate::rng::substream(seed, "synthetic", &[kind as u64, height as u64, width as u64]);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..SYNTHETIC_CLASSES);
        let img = match kind {
            SyntheticKind::Quadrant => quadrant_image(class, height, width, &mut rng),
            SyntheticKind::Color => color_image(class, height, width, &mut rng),
        };
        images.push(img);
        labels.push(class);
    }
    InMemoryDataset { height, width, images, labels, num_classes: SYNTHETIC_CLASSES }
}

fn quadrant_image(class: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut img = vec![0u8; h * w * 3];
    for v in img.iter_mut() {
        *v = rng.gen_range(0..60);
    }
    let blob = (h.min(w) / 4).max(1);
    let (qh, qw) = (h / 2, w / 2);
    let (r0, c0) = (if class >= 2 { qh } else { 0 }, if class % 2 == 1 { qw } else { 0 });
    // keep the blob strictly inside its quadrant
    let r = r0 + rng.gen_range(0..=(qh - blob));
    let c = c0 + rng.gen_range(0..=(qw - blob));
    for dr in 0..blob {
        for dc in 0..blob {
            let base = ((r + dr) * w + (c + dc)) * 3;
            for ch in 0..3 {
                img[base + ch] = rng.gen_range(200..=255);
            }
        }
    }
    img
}

fn color_image(class: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<u8> {
    // 0: red, 1: green, 2: blue, 3: yellow (red+green)
    let mut img = vec![0u8; h * w * 3];
    for p in 0..h * w {
        let strong: u8 = rng.gen_range(150..=215);
        let (r, g, b) = match class {
            0 => (strong, 0, 0),
            1 => (0, strong, 0),
            2 => (0, 0, strong),
            _ => (strong, strong, 0),
        };
        // light per-pixel noise on every channel
        img[p * 3] = r.saturating_add(rng.gen_range(0..40));
        img[p * 3 + 1] = g.saturating_add(rng.gen_range(0..40));
        img[p * 3 + 2] = b.saturating_add(rng.gen_range(0..40));
    }
    img
}

/// Recomputes the quadrant label from pixel data (test oracle): quadrant of
/// the brightest pixel.
pub fn quadrant_label_of_image(img: &[u8], h: usize, w: usize) -> usize {
    let mut best = 0usize;
    let mut best_sum = 0u32;
    for p in 0..h * w {
        let s = img[p * 3] as u32 + img[p * 3 + 1] as u32 + img[p * 3 + 2] as u32;
        if s > best_sum {
            best_sum = s;
            best = p;
        }
    }
    quadrant_class(best / w, best % w, h, w)
}
