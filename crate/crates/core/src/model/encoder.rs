//! Graph construction for the pre-norm encoder:
//! `ẑ = SelfAttention(norm(z)) + z; z = MLP(norm(ẑ)) + ẑ`, N times, then a
//! final norm. Attention is scaled dot-product with per-head split,
//! scale 1/√(d/heads), qkv bias on.

use super::{BlockIds, HeadMode, ModelError, PixelTransformer};
use crate::numerics::{Graph, NodeId};
use crate::scalar::Real;
use crate::tokenization::{ImageTensor, TokenSequence};
use rand::Rng;

const LN_EPS: f64 = 1e-6;

/// Post-softmax attention weights of one (layer, head) pair, with the grid
/// coordinate of every query/key slot (cls has none).
#[derive(Debug, Clone)]
pub struct AttentionRecord<F: Real> {
    pub layer: usize,
    pub head: usize,
    /// L'×L' row-stochastic matrix.
    pub weights: Vec<F>,
    pub seq_len: usize,
    pub query_coords: Vec<Option<(f64, f64)>>,
    pub key_coords: Vec<Option<(f64, f64)>>,
}

/// Per-sample survival factors for every residual branch: 0 drops the
/// branch, 1/(1-rate) rescales survivors. One draw per (block, branch,
/// sample), all from one stream so steps replay exactly.
#[derive(Debug, Clone)]
pub struct DropPathDraws<F: Real> {
    factors: Vec<[Vec<F>; 2]>,
}

impl<F: Real> DropPathDraws<F> {
    pub fn draw(layers: usize, batch: usize, rate: f64, rng: &mut impl Rng) -> Option<Self> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - rate);
        let mut factors = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut pair: [Vec<F>; 2] = [Vec::with_capacity(batch), Vec::with_capacity(batch)];
            for branch in &mut pair {
                for _ in 0..batch {
                    let survives = rng.gen::<f64>() >= rate;
                    branch.push(if survives { F::of_f64(keep) } else { F::zero() });
                }
            }
            factors.push(pair);
        }
        Some(DropPathDraws { factors })
    }

    fn factors(&self, layer: usize, branch: usize) -> &[F] {
        &self.factors[layer][branch]
    }
}

/// Stochastic depth on a residual branch: in training, zero the branch per
/// sample with probability `rate` and scale survivors by 1/(1−rate); in
/// eval (or rate 0) the identity.
pub fn drop_path<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<NodeId, ModelError> {
    if !training || rate <= 0.0 {
        return Ok(x);
    }
    let batch = g.shape(x)[0];
    let keep = 1.0 / (1.0 - rate);
    let factors: Vec<F> = (0..batch)
        .map(|_| if rng.gen::<f64>() >= rate { F::of_f64(keep) } else { F::zero() })
        .collect();
    Ok(g.row_scale(x, factors)?)
}

pub(crate) struct EncoderOutput<F: Real> {
    pub tokens: NodeId,
    pub records: Option<Vec<AttentionRecord<F>>>,
}

impl<F: Real> PixelTransformer<F> {
    /// Project raw tokens, prepend cls (+ its PE slot), add PE.
    /// `raw` is `[B, L, token_dim]`.
    pub(crate) fn embed_graph(
        &self,
        g: &mut Graph<F>,
        raw: NodeId,
    ) -> Result<NodeId, ModelError> {
        let batch = g.shape(raw)[0];
        let w = g.param(&self.params, self.layout.embed_w);
        let b = g.param(&self.params, self.layout.embed_b);
        let projected = g.linear(raw, w, Some(b))?;
        let cls = g.param(&self.params, self.layout.cls);
        let cls_tokens = g.broadcast_token(cls, batch, 1)?;
        let x = g.concat_tokens(cls_tokens, projected)?;
        let with_pe = match self.layout.pos_embed {
            Some(pe_id) => {
                let pe = g.param(&self.params, pe_id);
                g.add_rows(x, pe)?
            }
            None => {
                let table = self.fixed_pe.as_ref().expect("fixed PE for non-learned modes");
                if table.data().iter().all(|v| v.is_zero()) {
                    x // PE mode none: adding zeros is the identity
                } else {
                    let pe = g.constant_tensor(table)?;
                    g.add_rows(x, pe)?
                }
            }
        };
        Ok(with_pe)
    }

    /// One pre-norm block over `[B, L', d]`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_graph(
        &self,
        g: &mut Graph<F>,
        x: NodeId,
        ids: &BlockIds,
        heads: usize,
        layer: usize,
        drop: Option<&DropPathDraws<F>>,
        records: &mut Option<(Vec<AttentionRecord<F>>, Vec<Option<(f64, f64)>>)>,
    ) -> Result<NodeId, ModelError> {
        let shape = g.shape(x).to_vec();
        let (batch, l, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;

        let ln1_g = g.param(&self.params, ids.ln1_g);
        let ln1_b = g.param(&self.params, ids.ln1_b);
        let h = g.layernorm(x, ln1_g, ln1_b, F::of_f64(LN_EPS))?;

        let mut project = |g: &mut Graph<F>, w, b| -> Result<NodeId, ModelError> {
            let wn = g.param(&self.params, w);
            let bn = g.param(&self.params, b);
            let y = g.linear(h, wn, Some(bn))?;
            let split = g.reshape(y, vec![batch, l, heads, dh])?;
            Ok(g.permute(split, &[0, 2, 1, 3])?)
        };
        let q = project(g, ids.wq, ids.bq)?;
        let k = project(g, ids.wk, ids.bk)?;
        let v = project(g, ids.wv, ids.bv)?;

        let raw_scores = g.matmul_nt(q, k)?;
        let scores = g.scale(raw_scores, F::of_f64(1.0 / (dh as f64).sqrt()))?;
        let attn = g.softmax(scores, 3)?;

        if let Some((recs, coords)) = records.as_mut() {
            debug_assert_eq!(batch, 1, "attention recording is single-image");
            let weights = g.value(attn);
            for head in 0..heads {
                recs.push(AttentionRecord {
                    layer,
                    head,
                    weights: weights[head * l * l..(head + 1) * l * l].to_vec(),
                    seq_len: l,
                    query_coords: coords.clone(),
                    key_coords: coords.clone(),
                });
            }
        }

        let ctx = g.matmul(attn, v)?;
        let joined = g.permute(ctx, &[0, 2, 1, 3])?;
        let merged = g.reshape(joined, vec![batch, l, d])?;
        let wo = g.param(&self.params, ids.wo);
        let bo = g.param(&self.params, ids.bo);
        let mut attn_out = g.linear(merged, wo, Some(bo))?;
        if let Some(dp) = drop {
            attn_out = g.row_scale(attn_out, dp.factors(layer, 0).to_vec())?;
        }
        let z_hat = g.add(attn_out, x)?;

        let ln2_g = g.param(&self.params, ids.ln2_g);
        let ln2_b = g.param(&self.params, ids.ln2_b);
        let h2 = g.layernorm(z_hat, ln2_g, ln2_b, F::of_f64(LN_EPS))?;
        let w1 = g.param(&self.params, ids.mlp_w1);
        let b1 = g.param(&self.params, ids.mlp_b1);
        let pre = g.linear(h2, w1, Some(b1))?;
        let act = g.gelu(pre)?;
        let w2 = g.param(&self.params, ids.mlp_w2);
        let b2 = g.param(&self.params, ids.mlp_b2);
        let mut mlp_out = g.linear(act, w2, Some(b2))?;
        if let Some(dp) = drop {
            mlp_out = g.row_scale(mlp_out, dp.factors(layer, 1).to_vec())?;
        }
        Ok(g.add(mlp_out, z_hat)?)
    }

    /// N blocks + final norm over embedded tokens `[B, L', d]`.
    pub(crate) fn encoder_graph(
        &self,
        g: &mut Graph<F>,
        mut x: NodeId,
        drop: Option<&DropPathDraws<F>>,
        record_coords: Option<Vec<Option<(f64, f64)>>>,
    ) -> Result<EncoderOutput<F>, ModelError> {
        let mut records = record_coords.map(|c| (Vec::new(), c));
        for (layer, ids) in self.layout.blocks.iter().enumerate() {
            x = self.block_graph(g, x, ids, self.cfg.heads, layer, drop, &mut records)?;
        }
        let fg = g.param(&self.params, self.layout.final_ln_g);
        let fb = g.param(&self.params, self.layout.final_ln_b);
        let out = g.layernorm(x, fg, fb, F::of_f64(LN_EPS))?;
        Ok(EncoderOutput { tokens: out, records: records.map(|(r, _)| r) })
    }

    /// Encoder over a pre-embedded token sequence (single image). Applies the
    /// blocks and final norm only; no cls is added and no PE is applied, so
    /// with PE `none` upstream this is exactly the permutation-equivariant
    /// set map.
    pub fn forward_encoder(
        &self,
        tokens: &TokenSequence<F>,
        record_attention: bool,
    ) -> Result<(TokenSequence<F>, Option<Vec<AttentionRecord<F>>>), ModelError> {
        if tokens.dim() != self.cfg.hidden_dim {
            return Err(ModelError::InvalidConfig(format!(
                "token dim {} for a d={} encoder",
                tokens.dim(),
                self.cfg.hidden_dim
            )));
        }
        let mut g = Graph::new();
        let l = tokens.len();
        let x = g.constant(vec![1, l, self.cfg.hidden_dim], tokens.tokens.data().to_vec())?;
        let out = self.encoder_graph(
            &mut g,
            x,
            None,
            record_attention.then(|| tokens.coords.clone()),
        )?;
        let data = g.value(out.tokens).to_vec();
        let seq = TokenSequence {
            tokens: crate::numerics::Tensor::from_vec(vec![l, self.cfg.hidden_dim], data)?,
            coords: tokens.coords.clone(),
            has_cls: tokens.has_cls,
        };
        Ok((seq, out.records))
    }

    /// Full classifier graph from raw image tokens: embed → encode → head.
    /// Returns the logits node `[B, C]`.
    pub(crate) fn classifier_graph(
        &self,
        g: &mut Graph<F>,
        raw: NodeId,
        drop: Option<&DropPathDraws<F>>,
    ) -> Result<NodeId, ModelError> {
        let x = self.embed_graph(g, raw)?;
        let encoded = self.encoder_graph(g, x, drop, None)?;
        self.head_graph(g, encoded.tokens)
    }

    pub(crate) fn head_graph(&self, g: &mut Graph<F>, tokens: NodeId) -> Result<NodeId, ModelError> {
        let l_total = g.shape(tokens)[1];
        let features = match self.cfg.head {
            HeadMode::Gap => {
                let grid: Vec<usize> = (1..l_total).collect();
                let pooled = g.gather_tokens_shared(tokens, &grid)?;
                g.mean_tokens(pooled)?
            }
            HeadMode::Cls => {
                let batch = g.shape(tokens)[0];
                let cls = g.gather_tokens_shared(tokens, &[0])?;
                g.reshape(cls, vec![batch, self.cfg.hidden_dim])?
            }
        };
        let hw = g.param(&self.params, self.layout.head_w);
        let hb = g.param(&self.params, self.layout.head_b);
        Ok(g.linear(features, hw, Some(hb))?)
    }

    /// Eval-mode logits for a batch of normalized images.
    pub fn forward_classifier_batch(
        &self,
        images: &[ImageTensor<F>],
    ) -> Result<Vec<Vec<F>>, ModelError> {
        let (data, l, c) = self.batch_raw_tokens(images)?;
        let mut g = Graph::new();
        let raw = g.constant(vec![images.len(), l, c], data)?;
        let logits = self.classifier_graph(&mut g, raw, None)?;
        let classes = self.cfg.num_classes;
        Ok(g.value(logits).chunks(classes).map(|r| r.to_vec()).collect())
    }

    /// Eval-mode logits for one normalized image.
    pub fn forward_classifier(&self, image: &ImageTensor<F>) -> Result<Vec<F>, ModelError> {
        Ok(self.forward_classifier_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Forward one image recording every layer/head attention matrix.
    pub fn forward_with_attention(
        &self,
        image: &ImageTensor<F>,
    ) -> Result<(Vec<F>, Vec<AttentionRecord<F>>), ModelError> {
        let (data, l, c) = self.batch_raw_tokens(std::slice::from_ref(image))?;
        let mut g = Graph::new();
        let raw = g.constant(vec![1, l, c], data)?;
        let x = self.embed_graph(&mut g, raw)?;
        let encoded = self.encoder_graph(&mut g, x, None, Some(self.token_coords()))?;
        let logits = self.head_graph(&mut g, encoded.tokens)?;
        Ok((g.value(logits).to_vec(), encoded.records.unwrap_or_default()))
    }
}
