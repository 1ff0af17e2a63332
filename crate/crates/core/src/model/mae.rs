//! Masked autoencoding: encode a random visible subset of the tokens, then
//! regress the missing raw pixel values with a light decoder. Targets are
//! the normalized pixel values themselves (a pixel token has only 3
//! channels, so per-token standardization would be degenerate).

use super::{init_block, BlockIds, ModelConfig, ModelError, PixelTransformer};
use crate::numerics::{Graph, ParamId, Tensor};
use crate::scalar::Real;
use crate::tokenization::ImageTensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    /// Base seed of the masking stream.
    pub seed: u64,
}

impl MaeConfig {
    /// Decoder scaled down from the MAE-paper one in proportion to the
    /// encoder: 4 layers, dim d/2, 8 heads (Tiny) or 12 (Small+).
    pub fn for_encoder(cfg: &ModelConfig, seed: u64) -> Self {
        MaeConfig {
            mask_ratio: 0.75,
            decoder_layers: 4,
            decoder_dim: (cfg.hidden_dim / 2).max(8),
            decoder_heads: if cfg.hidden_dim <= 192 { 8 } else { 12 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio == 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "mask_ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if self.decoder_dim == 0
            || self.decoder_heads == 0
            || self.decoder_dim % self.decoder_heads != 0
        {
            return Err(ModelError::InvalidConfig(format!(
                "decoder dim {} must be a positive multiple of {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        Ok(())
    }

    /// Number of masked tokens for a sequence of length `l`: round(ratio·L),
    /// clamped so at least one token is masked and one visible.
    pub fn masked_count(&self, l: usize) -> usize {
        ((self.mask_ratio * l as f64).round() as usize).clamp(1, l - 1)
    }
}

/// Uniformly random visible/masked split of `0..l`, drawn from `rng`.
/// Returns (visible, masked); the union is a partition of the token range.
pub fn mae_mask(l: usize, cfg: &MaeConfig, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..l).collect();
    order.shuffle(rng);
    let masked_n = cfg.masked_count(l);
    let visible = order[masked_n..].to_vec();
    let masked = order[..masked_n].to_vec();
    (visible, masked)
}

struct DecoderLayout {
    embed_w: ParamId,
    embed_b: ParamId,
    mask_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<BlockIds>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Encoder plus MAE decoder; the decoder parameters live in the encoder's
/// store under the `mae.` prefix so one optimizer drives both.
pub struct MaeAutoencoder<F: Real> {
    pub model: PixelTransformer<F>,
    pub mae: MaeConfig,
    decoder: DecoderLayout,
}

/// One MAE forward: the loss node is alive inside `graph`.
pub struct MaeForward<F: Real> {
    pub graph: Graph<F>,
    pub loss: crate::numerics::NodeId,
    pub loss_value: F,
    /// Grid-position reconstruction `[B, L, c]`, raster order.
    pub reconstruction: Vec<F>,
    /// Encoder sequence length excluding cls (|visible|).
    pub visible_len: usize,
    pub masks: Vec<Vec<usize>>,
}

impl<F: Real> MaeAutoencoder<F> {
    pub fn new(cfg: ModelConfig, mae: MaeConfig, seed: u64) -> Result<Self, ModelError> {
        mae.validate()?;
        let mut model = PixelTransformer::new(cfg, seed)?;
        let mut rng = crate::rng::stream(seed, "mae-decoder-init");
        let d = model.cfg.hidden_dim;
        let dd = mae.decoder_dim;
        let l = model.cfg.seq_len();
        let store = &mut model.params;
        let embed_w = store.add("mae.embed.w", Tensor::trunc_normal(vec![d, dd], 0.02, &mut rng));
        let embed_b = store.add("mae.embed.b", Tensor::zeros(vec![dd]));
        let mask_token = store.add("mae.mask_token", Tensor::trunc_normal(vec![dd], 0.02, &mut rng));
        let pos_embed = store.add(
            "mae.decoder.pos_embed",
            Tensor::trunc_normal(vec![l + 1, dd], 0.02, &mut rng),
        );
        let blocks = (0..mae.decoder_layers)
            .map(|i| init_block(store, &format!("mae.decoder.blocks.{i}"), dd, dd * 4, &mut rng))
            .collect();
        let final_ln_g = store.add("mae.decoder.final_ln.g", Tensor::filled(vec![dd], F::one()));
        let final_ln_b = store.add("mae.decoder.final_ln.b", Tensor::zeros(vec![dd]));
        let token_dim = model.cfg.tokenizer.token_dim();
        let head_w = store.add("mae.head.w", Tensor::trunc_normal(vec![dd, token_dim], 0.02, &mut rng));
        let head_b = store.add("mae.head.b", Tensor::zeros(vec![token_dim]));
        Ok(MaeAutoencoder {
            model,
            mae,
            decoder: DecoderLayout {
                embed_w,
                embed_b,
                mask_token,
                pos_embed,
                blocks,
                final_ln_g,
                final_ln_b,
                head_w,
                head_b,
            },
        })
    }

    /// Masked-autoencoding forward over a batch of normalized images.
    /// Masks are drawn from the config's seed stream keyed by `mask_key`
    /// (e.g. [epoch, step]), so a resumed run replays them exactly.
    pub fn forward_mae(
        &self,
        images: &[ImageTensor<F>],
        mask_key: &[u64],
        training: bool,
    ) -> Result<MaeForward<F>, ModelError> {
        let (raw, l, c) = self.model.batch_raw_tokens(images)?;
        let batch = images.len();
        let d = self.model.cfg.hidden_dim;
        let mut rng = crate::rng::substream(self.mae.seed, "mae-mask", mask_key);
        let mut visible_idx = Vec::with_capacity(batch);
        let mut masked_idx = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (v, m) = mae_mask(l, &self.mae, &mut rng);
            visible_idx.push(v);
            masked_idx.push(m);
        }
        let lv = visible_idx[0].len();
        let lm = l - lv;

        let mut g = Graph::new();
        // visible raw tokens, gathered on the host (inputs carry no gradient)
        let mut vis_raw = Vec::with_capacity(batch * lv * c);
        for (bi, vis) in visible_idx.iter().enumerate() {
            for &t in vis {
                let base = (bi * l + t) * c;
                vis_raw.extend_from_slice(&raw[base..base + c]);
            }
        }
        let vis_node = g.constant(vec![batch, lv, c], vis_raw)?;
        let ew = g.param(&self.model.params, self.model.layout.embed_w);
        let eb = g.param(&self.model.params, self.model.layout.embed_b);
        let projected = g.linear(vis_node, ew, Some(eb))?;

        // per-sample PE rows for the visible positions (+1 for the cls slot)
        let pe_rows: Vec<Vec<usize>> =
            visible_idx.iter().map(|v| v.iter().map(|&t| t + 1).collect()).collect();
        let x = match self.model.layout.pos_embed {
            Some(pe_id) => {
                let pe = g.param(&self.model.params, pe_id);
                let rows = g.table_gather(pe, pe_rows)?;
                g.add(projected, rows)?
            }
            None => {
                let table = self.model.fixed_pe.as_ref().expect("fixed PE table");
                let dt = table.shape()[1];
                let mut rows = Vec::with_capacity(batch * lv * dt);
                for list in &pe_rows {
                    for &r in list {
                        rows.extend_from_slice(&table.data()[r * dt..(r + 1) * dt]);
                    }
                }
                let rows_node = g.constant(vec![batch, lv, dt], rows)?;
                g.add(projected, rows_node)?
            }
        };

        // cls with its PE slot
        let cls = g.param(&self.model.params, self.model.layout.cls);
        let cls_tok = g.broadcast_token(cls, batch, 1)?;
        let cls_with_pe = match self.model.layout.pos_embed {
            Some(pe_id) => {
                let pe = g.param(&self.model.params, pe_id);
                let row0 = g.table_gather(pe, vec![vec![0]; batch])?;
                g.add(cls_tok, row0)?
            }
            None => cls_tok,
        };
        let enc_in = g.concat_tokens(cls_with_pe, x)?;

        let drop = if training {
            let mut dp_rng = crate::rng::substream(self.mae.seed, "mae-drop-path", mask_key);
            super::DropPathDraws::draw(
                self.model.cfg.layers,
                batch,
                self.model.cfg.drop_path_rate,
                &mut dp_rng,
            )
        } else {
            None
        };
        let encoded = self.model.encoder_graph(&mut g, enc_in, drop.as_ref(), None)?;

        // decoder: project, re-insert mask tokens, restore raster order
        let dw = g.param(&self.model.params, self.decoder.embed_w);
        let db = g.param(&self.model.params, self.decoder.embed_b);
        let dec_in = g.linear(encoded.tokens, dw, Some(db))?;
        let cls_dec = g.gather_tokens_shared(dec_in, &[0])?;
        let vis_dec = g.gather_tokens_shared(dec_in, &(1..=lv).collect::<Vec<_>>())?;
        let mask_tok = g.param(&self.model.params, self.decoder.mask_token);
        let mask_filled = g.broadcast_token(mask_tok, batch, lm)?;
        let combined = g.concat_tokens(vis_dec, mask_filled)?;
        // combined holds visible tokens then mask tokens; send each back to
        // its grid position
        let mut restore = Vec::with_capacity(batch);
        for bi in 0..batch {
            let mut pos_of = vec![0usize; l];
            for (i, &t) in visible_idx[bi].iter().enumerate() {
                pos_of[t] = i;
            }
            for (i, &t) in masked_idx[bi].iter().enumerate() {
                pos_of[t] = lv + i;
            }
            restore.push(pos_of);
        }
        let grid_ordered = g.gather_tokens(combined, restore)?;
        let full = g.concat_tokens(cls_dec, grid_ordered)?;
        let dec_pe = g.param(&self.model.params, self.decoder.pos_embed);
        let mut z = g.add_rows(full, dec_pe)?;
        let mut no_records = None;
        for (layer, ids) in self.decoder.blocks.iter().enumerate() {
            z = self.model.block_graph(
                &mut g,
                z,
                ids,
                self.mae.decoder_heads,
                layer,
                None,
                &mut no_records,
            )?;
        }
        let fg = g.param(&self.model.params, self.decoder.final_ln_g);
        let fb = g.param(&self.model.params, self.decoder.final_ln_b);
        let z = g.layernorm(z, fg, fb, F::of_f64(1e-6))?;
        let hw = g.param(&self.model.params, self.decoder.head_w);
        let hb = g.param(&self.model.params, self.decoder.head_b);
        let pred_full = g.linear(z, hw, Some(hb))?;
        let pred_grid = g.gather_tokens_shared(pred_full, &(1..=l).collect::<Vec<_>>())?;

        let mut mask_flags = vec![false; batch * l];
        for (bi, masked) in masked_idx.iter().enumerate() {
            for &t in masked {
                mask_flags[bi * l + t] = true;
            }
        }
        let loss = g.mse_masked(pred_grid, &raw, &mask_flags)?;
        let loss_value = g.scalar_value(loss);
        let reconstruction = g.value(pred_grid).to_vec();
        Ok(MaeForward {
            graph: g,
            loss,
            loss_value,
            reconstruction,
            visible_len: lv,
            masks: masked_idx,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MaeConfig {
        MaeConfig { mask_ratio: 0.75, decoder_layers: 2, decoder_dim: 16, decoder_heads: 4, seed: 9 }
    }

    #[test]
    fn mask_split_sizes_per_spec() {
        let c = cfg();
        let mut rng = crate::rng::stream(1, "mask");
        let (v, m) = mae_mask(1024, &c, &mut rng);
        assert_eq!(v.len(), 256);
        assert_eq!(m.len(), 768);
    }

    #[test]
    fn mask_is_a_partition() {
        let c = cfg();
        let mut rng = crate::rng::stream(2, "mask");
        let (v, m) = mae_mask(37, &c, &mut rng);
        let mut all: Vec<usize> = v.iter().chain(m.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_ratio_still_masks_one() {
        let c = MaeConfig { mask_ratio: 0.001, ..cfg() };
        let mut rng = crate::rng::stream(3, "mask");
        let (v, m) = mae_mask(64, &c, &mut rng);
        assert_eq!(m.len(), 1);
        assert_eq!(v.len(), 63);
        // and the complementary clamp keeps one visible
        let hi = MaeConfig { mask_ratio: 0.999, ..cfg() };
        let (v2, m2) = mae_mask(64, &hi, &mut rng);
        assert_eq!(v2.len(), 1);
        assert_eq!(m2.len(), 63);
    }
}
