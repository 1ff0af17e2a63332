//! Dataset ingestion (CIFAR-100 binary, synthetic generators, raw folders),
//! the augmentation pipeline, and batch assembly.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{basic_augment, cutmix, cutmix_with_lambda, mixup, mixup_with_lambda, RandAugConfig};
pub use cifar::{load_cifar100_file, write_cifar100, CIFAR_RECORD_BYTES};
pub use synthetic::{quadrant_class, synthetic_dataset, SyntheticKind};

use crate::scalar::Real;
use crate::tokenization::{ImageTensor, NormStats};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: truncated CIFAR file: {len} bytes is not a multiple of {record} (first bad offset {offset})")]
    Truncated { path: PathBuf, len: u64, record: u64, offset: u64 },
    #[error("{path}: record {index} carries fine label {label} >= 100")]
    BadLabel { path: PathBuf, index: usize, label: u8 },
    #[error("{path}, line {line}: {detail}")]
    BadIndexFile { path: PathBuf, line: usize, detail: String },
    #[error("invalid dataset spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory holding `train.bin` / `test.bin` in CIFAR-100 binary layout.
    Cifar100Bin { path: PathBuf },
    Synthetic { kind: SyntheticKind, count: usize, seed: u64, height: usize, width: usize },
    /// `index.tsv` (path \t label) plus headerless H×W×3 byte files.
    RawFolder { path: PathBuf, height: usize, width: usize, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub split: Split,
    pub normalization: NormStats,
}

/// Decoded dataset held in memory as raw bytes; batches normalize lazily.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl InMemoryDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl DatasetSpec {
    /// Load the dataset; relative paths are resolved against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<InMemoryDataset, DataError> {
        match &self.source {
            DatasetSource::Cifar100Bin { path } => {
                let file = match self.split {
                    Split::Train => "train.bin",
                    Split::Val => "test.bin",
                };
                load_cifar100_file(&resolve(base_dir, path).join(file))
            }
            DatasetSource::Synthetic { kind, count, seed, height, width } => {
                // train/val draw from disjoint streams of the same generator
                let split_seed = match self.split {
                    Split::Train => *seed,
                    Split::Val => seed.wrapping_add(0x5eed_0f0f),
                };
                Ok(synthetic_dataset(*kind, *count, split_seed, *height, *width))
            }
            DatasetSource::RawFolder { path, height, width, num_classes } => {
                load_raw_folder(&resolve(base_dir, path), *height, *width, *num_classes, self.split)
            }
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_raw_folder(
    dir: &Path,
    height: usize,
    width: usize,
    num_classes: usize,
    split: Split,
) -> Result<InMemoryDataset, DataError> {
    let index = dir.join(match split {
        Split::Train => "index.tsv",
        Split::Val => "index_val.tsv",
    });
    let text = std::fs::read_to_string(&index)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (rel, label) = match (parts.next(), parts.next()) {
            (Some(r), Some(l)) => (r, l),
            _ => {
                return Err(DataError::BadIndexFile {
                    path: index.clone(),
                    line: ln + 1,
                    detail: format!("expected \"path<TAB>label\", got {:?}", line),
                })
            }
        };
        let label: usize = label.trim().parse().map_err(|_| DataError::BadIndexFile {
            path: index.clone(),
            line: ln + 1,
            detail: format!("bad label {:?}", label),
        })?;
        if label >= num_classes {
            return Err(DataError::BadIndexFile {
                path: index.clone(),
                line: ln + 1,
                detail: format!("label {} >= num_classes {}", label, num_classes),
            });
        }
        let bytes = std::fs::read(dir.join(rel))?;
        if bytes.len() != height * width * 3 {
            return Err(DataError::BadIndexFile {
                path: index.clone(),
                line: ln + 1,
                detail: format!(
                    "{:?}: {} bytes, expected {} for {}x{}x3",
                    rel,
                    bytes.len(),
                    height * width * 3,
                    height,
                    width
                ),
            });
        }
        images.push(bytes);
        labels.push(label);
    }
    Ok(InMemoryDataset { height, width, images, labels, num_classes })
}

/// A training batch: normalized images plus soft labels on the simplex.
#[derive(Debug, Clone)]
pub struct Batch<F: Real> {
    pub images: Vec<ImageTensor<F>>,
    /// Row-major `[B, num_classes]`, rows sum to 1.
    pub labels: Vec<F>,
    pub num_classes: usize,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.labels
            .chunks(self.num_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Augmentation switches; seeds are derived per (epoch, sample) so parallel
/// prefetch cannot change the draw order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub random_crop_padding: Option<usize>,
    pub hflip_prob: f64,
    pub mixup_alpha: Option<f64>,
    pub cutmix_alpha: Option<f64>,
    pub randaug: Option<RandAugConfig>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            random_crop_padding: None,
            hflip_prob: 0.0,
            mixup_alpha: None,
            cutmix_alpha: None,
            randaug: None,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// Pad-4 random crop + 50% horizontal flip (the from-scratch CIFAR recipe).
    pub fn cifar_supervised() -> Self {
        AugmentationConfig {
            random_crop_padding: Some(4),
            hflip_prob: 0.5,
            ..Self::default()
        }
    }

    /// Crop/flip plus MixUp (0.8), CutMix (1.0), RandAug (9, 0.5).
    pub fn imagenet_style() -> Self {
        AugmentationConfig {
            random_crop_padding: Some(4),
            hflip_prob: 0.5,
            mixup_alpha: Some(0.8),
            cutmix_alpha: Some(1.0),
            randaug: Some(RandAugConfig { magnitude: 9.0, mag_std: 0.5, num_ops: 2 }),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.random_crop_padding.is_none()
            && self.hflip_prob == 0.0
            && self.mixup_alpha.is_none()
            && self.cutmix_alpha.is_none()
            && self.randaug.is_none()
    }
}

/// Assemble a batch for the given dataset indices: per-sample augmentation,
/// normalization, one-hot labels, then MixUp or CutMix (alternating draw)
/// when configured. Fully determined by `(seed, epoch, step)`.
pub fn assemble_batch<F: Real>(
    ds: &InMemoryDataset,
    indices: &[usize],
    aug: &AugmentationConfig,
    norm: NormStats,
    seed: u64,
    epoch: u64,
    step: u64,
) -> Batch<F> {
    let mut images = Vec::with_capacity(indices.len());
    let mut labels = vec![F::zero(); indices.len() * ds.num_classes];
    for (bi, &di) in indices.iter().enumerate() {
        let mut rng = crate::rng::substream(seed, "augment", &[epoch, di as u64]);
        let bytes = basic_augment(&ds.images[di], ds.height, ds.width, aug, &mut rng);
        let raw: ImageTensor<F> = ImageTensor::from_bytes(ds.height, ds.width, &bytes);
        images.push(raw.normalize(norm));
        labels[bi * ds.num_classes + ds.labels[di]] = F::one();
    }
    let mut batch = Batch { images, labels, num_classes: ds.num_classes };
    let mut mix_rng = crate::rng::substream(seed, "mix", &[epoch, step]);
    use rand::Rng;
    match (aug.mixup_alpha, aug.cutmix_alpha) {
        (Some(ma), Some(ca)) => {
            if mix_rng.gen::<f64>() < 0.5 {
                mixup(&mut batch, ma, &mut mix_rng);
            } else {
                cutmix(&mut batch, ca, &mut mix_rng);
            }
        }
        (Some(ma), None) => mixup(&mut batch, ma, &mut mix_rng),
        (None, Some(ca)) => cutmix(&mut batch, ca, &mut mix_rng),
        (None, None) => {}
    }
    batch
}

/// Epoch ordering of dataset indices, shuffled by the per-epoch stream.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = crate::rng::substream(seed, "epoch-shuffle", &[epoch]);
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests;
