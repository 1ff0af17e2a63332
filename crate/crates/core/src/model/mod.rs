//! Pre-norm Transformer encoder with classification and masked-autoencoding
//! heads, the four size presets, parameter accounting, and the checkpoint
//! container.

mod checkpoint;
mod encoder;
mod mae;

pub use checkpoint::{load_encoder_from_mae, Checkpoint, CheckpointHeader};
pub(crate) use checkpoint::load_params;
pub use encoder::{drop_path, AttentionRecord, DropPathDraws};
pub use mae::{mae_mask, MaeAutoencoder, MaeConfig, MaeForward};

use crate::numerics::{NumericsError, ParamId, ParamStore, Tensor};
use crate::scalar::Real;
use crate::tokenization::{
    extract_patches, extract_pixels, generate_permutation, ImageTensor, PeMode, PermProvenance,
    PermutationMap, PositionEmbeddingSpec, TokenizationError,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenization(#[from] TokenizationError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TokenizerMode {
    Pixel,
    Patch { p: usize },
    /// Patch tokenization after a fixed pixel permutation; the provenance
    /// regenerates the shared map deterministically.
    PermutedPatch { p: usize, perm: PermProvenance },
}

impl TokenizerMode {
    pub fn patch_size(&self) -> usize {
        match self {
            TokenizerMode::Pixel => 1,
            TokenizerMode::Patch { p } | TokenizerMode::PermutedPatch { p, .. } => *p,
        }
    }

    pub fn token_dim(&self) -> usize {
        let p = self.patch_size();
        3 * p * p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Classify from the cls output token.
    Cls,
    /// Classify from the mean of the non-cls output tokens.
    Gap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub tokenizer: TokenizerMode,
    pub pe: PeMode,
    pub head: HeadMode,
    pub drop_path_rate: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    fn size_preset(layers: usize, hidden: usize, mlp: usize, heads: usize) -> Self {
        ModelConfig {
            layers,
            hidden_dim: hidden,
            mlp_dim: mlp,
            heads,
            tokenizer: TokenizerMode::Pixel,
            pe: PeMode::Learned,
            head: HeadMode::Gap,
            drop_path_rate: 0.1,
            image_height: 32,
            image_width: 32,
            num_classes: 100,
        }
    }

    pub fn tiny() -> Self {
        Self::size_preset(12, 192, 768, 12)
    }

    pub fn small() -> Self {
        Self::size_preset(12, 384, 1536, 12)
    }

    pub fn base() -> Self {
        Self::size_preset(12, 768, 3072, 12)
    }

    pub fn large() -> Self {
        Self::size_preset(24, 1024, 4096, 16)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        let p = self.tokenizer.patch_size();
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "patch size {} does not divide {}x{}",
                p, self.image_height, self.image_width
            )));
        }
        if self.pe == PeMode::SinCos && self.hidden_dim % 4 != 0 {
            return Err(ModelError::InvalidConfig(
                "sin-cos position embedding needs hidden dim divisible by 4".into(),
            ));
        }
        if self.num_classes == 0 {
            return Err(ModelError::InvalidConfig("num_classes must be positive".into()));
        }
        if let TokenizerMode::PermutedPatch { perm, .. } = &self.tokenizer {
            if perm.height != self.image_height || perm.width != self.image_width {
                return Err(ModelError::InvalidConfig(format!(
                    "permutation grid {}x{} does not match image {}x{}",
                    perm.height, perm.width, self.image_height, self.image_width
                )));
            }
        }
        Ok(())
    }

    /// Grid of token positions (rows, cols).
    pub fn token_grid(&self) -> (usize, usize) {
        let p = self.tokenizer.patch_size();
        (self.image_height / p, self.image_width / p)
    }

    /// Number of grid tokens L (excluding cls).
    pub fn seq_len(&self) -> usize {
        let (gh, gw) = self.token_grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn pe_spec(&self) -> PositionEmbeddingSpec {
        PositionEmbeddingSpec {
            mode: self.pe,
            dim: self.hidden_dim,
            grid: self.token_grid(),
            includes_cls_slot: true,
        }
    }
}

/// Exact parameter counts from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Input projection + cls token.
    pub embedding: usize,
    /// Learned position embedding table (zero for sin-cos / none).
    pub pe: usize,
    /// Encoder blocks plus the final norm.
    pub blocks: usize,
    /// Classification head.
    pub head: usize,
}

impl ParamCount {
    /// Everything, the convention under which the size table is quoted
    /// (learned PE over the full grid + cls slot, plus the head).
    pub fn total_inclusive(&self) -> usize {
        self.embedding + self.pe + self.blocks + self.head
    }

    /// Blocks + final norm + input projection + cls only.
    pub fn total_exclusive(&self) -> usize {
        self.embedding + self.blocks
    }
}

/// Parameter accounting from the config alone.
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.hidden_dim;
    let mlp = cfg.mlp_dim;
    let token_dim = cfg.tokenizer.token_dim();
    let embedding = token_dim * d + d + d; // proj w + proj b + cls
    let pe = if cfg.pe == PeMode::Learned { (cfg.seq_len() + 1) * d } else { 0 };
    let per_block = 4 * (d * d + d) // q, k, v, o with bias
        + 4 * d // two layer norms
        + d * mlp + mlp + mlp * d + d; // MLP
    let blocks = cfg.layers * per_block + 2 * d; // + final norm
    let head = d * cfg.num_classes + cfg.num_classes;
    ParamCount { embedding, pe, blocks, head }
}

pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

pub(crate) struct Layout {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub cls: ParamId,
    pub pos_embed: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// The encoder with its parameters; one instance per training process.
pub struct PixelTransformer<F: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub(crate) layout: Layout,
    pub(crate) perm: Option<PermutationMap>,
    /// Fixed PE table for sin-cos / none modes (with cls slot).
    pub(crate) fixed_pe: Option<Tensor<F>>,
}

pub(crate) fn init_block<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
    mlp: usize,
    rng: &mut impl Rng,
) -> BlockIds {
    let mut linear = |name: String, rows: usize, cols: usize| {
        store.add(name, Tensor::trunc_normal(vec![rows, cols], 0.02, &mut *rng))
    };
    let wq = linear(format!("{prefix}.attn.wq"), d, d);
    let wk = linear(format!("{prefix}.attn.wk"), d, d);
    let wv = linear(format!("{prefix}.attn.wv"), d, d);
    let wo = linear(format!("{prefix}.attn.wo"), d, d);
    let mlp_w1 = linear(format!("{prefix}.mlp.w1"), d, mlp);
    let mlp_w2 = linear(format!("{prefix}.mlp.w2"), mlp, d);
    BlockIds {
        ln1_g: store.add(format!("{prefix}.ln1.g"), Tensor::filled(vec![d], F::one())),
        ln1_b: store.add(format!("{prefix}.ln1.b"), Tensor::zeros(vec![d])),
        wq,
        bq: store.add(format!("{prefix}.attn.bq"), Tensor::zeros(vec![d])),
        wk,
        bk: store.add(format!("{prefix}.attn.bk"), Tensor::zeros(vec![d])),
        wv,
        bv: store.add(format!("{prefix}.attn.bv"), Tensor::zeros(vec![d])),
        wo,
        bo: store.add(format!("{prefix}.attn.bo"), Tensor::zeros(vec![d])),
        ln2_g: store.add(format!("{prefix}.ln2.g"), Tensor::filled(vec![d], F::one())),
        ln2_b: store.add(format!("{prefix}.ln2.b"), Tensor::zeros(vec![d])),
        mlp_w1,
        mlp_b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(vec![mlp])),
        mlp_w2,
        mlp_b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(vec![d])),
    }
}

impl<F: Real> PixelTransformer<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(seed, "model-init");
        let mut params = ParamStore::new();
        let d = cfg.hidden_dim;
        let token_dim = cfg.tokenizer.token_dim();
        let embed_w = params.add("embed.w", Tensor::trunc_normal(vec![token_dim, d], 0.02, &mut rng));
        let embed_b = params.add("embed.b", Tensor::zeros(vec![d]));
        let cls = params.add("cls", Tensor::trunc_normal(vec![d], 0.02, &mut rng));
        let pos_embed = if cfg.pe == PeMode::Learned {
            Some(params.add(
                "pos_embed",
                Tensor::trunc_normal(vec![cfg.seq_len() + 1, d], 0.02, &mut rng),
            ))
        } else {
            None
        };
        let blocks = (0..cfg.layers)
            .map(|i| init_block(&mut params, &format!("blocks.{i}"), d, cfg.mlp_dim, &mut rng))
            .collect();
        let final_ln_g = params.add("final_ln.g", Tensor::filled(vec![d], F::one()));
        let final_ln_b = params.add("final_ln.b", Tensor::zeros(vec![d]));
        let head_w = params.add("head.w", Tensor::trunc_normal(vec![d, cfg.num_classes], 0.02, &mut rng));
        let head_b = params.add("head.b", Tensor::zeros(vec![cfg.num_classes]));
        let perm = match &cfg.tokenizer {
            TokenizerMode::PermutedPatch { perm, .. } => Some(generate_permutation(
                perm.height,
                perm.width,
                perm.swaps,
                perm.delta,
                perm.seed,
            )?),
            _ => None,
        };
        let fixed_pe = cfg.pe_spec().fixed_table();
        Ok(PixelTransformer {
            cfg,
            params,
            layout: Layout {
                embed_w,
                embed_b,
                cls,
                pos_embed,
                blocks,
                final_ln_g,
                final_ln_b,
                head_w,
                head_b,
            },
            perm,
            fixed_pe,
        })
    }

    /// Reinitialize the classification head (fine-tuning from MAE weights).
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = crate::rng::stream(seed, "head-reinit");
        let d = self.cfg.hidden_dim;
        let w = Tensor::trunc_normal(vec![d, self.cfg.num_classes], 0.02, &mut rng).requires_grad();
        self.params.get_mut(self.layout.head_w).tensor = w;
        self.params.get_mut(self.layout.head_b).tensor =
            Tensor::zeros(vec![self.cfg.num_classes]).requires_grad();
    }

    /// Raster raw tokens for a batch, applying the fixed pixel permutation
    /// first when the tokenizer asks for one. Returns (data [B, L, c], L, c).
    pub fn batch_raw_tokens(
        &self,
        images: &[ImageTensor<F>],
    ) -> Result<(Vec<F>, usize, usize), ModelError> {
        let c = self.cfg.tokenizer.token_dim();
        let l = self.cfg.seq_len();
        let mut data = Vec::with_capacity(images.len() * l * c);
        for img in images {
            if img.height != self.cfg.image_height || img.width != self.cfg.image_width {
                return Err(ModelError::InvalidConfig(format!(
                    "image {}x{} fed to a {}x{} model",
                    img.height, img.width, self.cfg.image_height, self.cfg.image_width
                )));
            }
            let permuted;
            let img = match &self.perm {
                Some(p) => {
                    permuted = img.apply_permutation(p)?;
                    &permuted
                }
                None => img,
            };
            match &self.cfg.tokenizer {
                TokenizerMode::Pixel => data.extend(extract_pixels(img).0),
                TokenizerMode::Patch { p } | TokenizerMode::PermutedPatch { p, .. } => {
                    data.extend(extract_patches(img, *p)?.0)
                }
            }
        }
        Ok((data, l, c))
    }

    /// Grid coordinates of the tokens (cls first, without a coordinate).
    pub fn token_coords(&self) -> Vec<Option<(f64, f64)>> {
        let p = self.cfg.tokenizer.patch_size();
        let (gh, gw) = self.cfg.token_grid();
        let half = (p as f64 - 1.0) / 2.0;
        let mut coords = Vec::with_capacity(gh * gw + 1);
        coords.push(None);
        for r in 0..gh {
            for c in 0..gw {
                coords.push(Some((r as f64 * p as f64 + half, c as f64 * p as f64 + half)));
            }
        }
        coords
    }

    /// Depth group for layer-wise lr decay: 0 = embedding (+PE, cls),
    /// 1..=N = blocks, N+1 = final norm and head.
    pub fn depth_of(&self, name: &str) -> usize {
        if let Some(rest) = name.strip_prefix("blocks.") {
            let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            return idx + 1;
        }
        match name {
            "embed.w" | "embed.b" | "cls" | "pos_embed" => 0,
            _ => self.cfg.layers + 1,
        }
    }

    /// Layer-wise lr multipliers for every parameter, store order.
    pub fn layerwise_scales(&self, decay: f64) -> Vec<f64> {
        self.params
            .iter()
            .map(|(_, p)| crate::optim::layerwise_lr(1.0, self.depth_of(&p.name), self.cfg.layers, decay))
            .collect()
    }
}
