//! The recorded compute graph.
//!
//! Builders evaluate eagerly, validate shapes, reject non-finite outputs, and
//! push one node per op. The tape is in topological order by construction, so
//! `backward` is a single reverse sweep. A graph lives for one training step;
//! gradients flow back into the [`ParamStore`] via [`Graph::accumulate_grads`],
//! which adds into any gradient already present (callers reset with
//! [`ParamStore::zero_grads`] between steps).

use super::kernels;
use super::tensor::{ParamId, ParamStore, Tensor};
use super::NumericsError;
use crate::scalar::Real;

pub type NodeId = usize;

enum Op<F: Real> {
    Leaf,
    Matmul { a: NodeId, b: NodeId, trans_b: bool },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add { a: NodeId, b: NodeId },
    AddRows { x: NodeId, table: NodeId },
    Scale { x: NodeId, c: F },
    RowScale { x: NodeId, factors: Vec<F> },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: F },
    Gelu { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    Reshape { x: NodeId },
    ConcatTokens { a: NodeId, b: NodeId },
    GatherTokens { x: NodeId, idx: Vec<Vec<usize>> },
    TableGather { table: NodeId, idx: Vec<Vec<usize>> },
    BroadcastToken { t: NodeId, batch: usize, n: usize },
    MeanTokens { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<F> },
    MseMasked { pred: NodeId, target: Vec<F>, mask: Vec<bool>, count: usize },
}

struct Node<F: Real> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    /// Per-row (mean, inv_std) for layernorm; softmax probs for cross-entropy.
    saved: Vec<F>,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    param_leaves: Vec<(NodeId, ParamId)>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_leaves: Vec::new() }
    }

    fn push(
        &mut self,
        op: Op<F>,
        shape: Vec<usize>,
        value: Vec<F>,
        requires_grad: bool,
        saved: Vec<F>,
        name: &'static str,
    ) -> Result<NodeId, NumericsError> {
        if let Some(index) = value.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: name, index });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, grad: None, requires_grad, saved });
        Ok(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    /// Leaf holding a parameter's current values; gradients land back on the
    /// parameter through [`Graph::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        let p = store.get(id);
        let node = Node {
            op: Op::Leaf,
            shape: p.tensor.shape().to_vec(),
            value: p.tensor.data().to_vec(),
            grad: None,
            requires_grad: p.tensor.requires_grad,
            saved: Vec::new(),
        };
        self.nodes.push(node);
        let nid = self.nodes.len() - 1;
        self.param_leaves.push((nid, id));
        nid
    }

    /// Non-trainable leaf (inputs, targets, fixed tables).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<NodeId, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::shape(
                "constant",
                format!("shape {:?} carries {} values, got {}", shape, numel, data.len()),
            ));
        }
        self.push(Op::Leaf, shape, data, false, Vec::new(), "constant")
    }

    pub fn constant_tensor(&mut self, t: &Tensor<F>) -> Result<NodeId, NumericsError> {
        self.constant(t.shape().to_vec(), t.data().to_vec())
    }

    /// Leaf that takes gradients but is not in any store (tests, probes).
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<NodeId, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::shape("variable", "shape/data length mismatch"));
        }
        self.push(Op::Leaf, shape, data, true, Vec::new(), "variable")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the trailing two axes.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(NumericsError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let r = sa.len();
        if sa[..r - 2] != sb[..r - 2] {
            return Err(NumericsError::shape(
                "matmul",
                format!("leading dims differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (n, bk) = if trans_b { (sb[r - 2], sb[r - 1]) } else { (sb[r - 1], sb[r - 2]) };
        if bk != k {
            return Err(NumericsError::shape(
                "matmul",
                format!("inner dims: {:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![F::zero(); batch * m * n];
        kernels::bmm(&self.nodes[a].value, &self.nodes[b].value, batch, m, k, n, trans_b, &mut out);
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Matmul { a, b, trans_b }, out_shape, out, rg, Vec::new(), "matmul")
    }

    /// `x · w (+ b)`, contracting the last axis of `x` with rows of `w`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, NumericsError> {
        let (sx, sw) = (&self.nodes[x].shape, &self.nodes[w].shape);
        if sx.is_empty() || sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(NumericsError::shape("linear", format!("{:?} x {:?}", sx, sw)));
        }
        let (d_in, d_out) = (sw[0], sw[1]);
        if let Some(bid) = b {
            if self.nodes[bid].shape != [d_out] {
                return Err(NumericsError::shape(
                    "linear",
                    format!("bias {:?} for w {:?}", self.nodes[bid].shape, sw),
                ));
            }
        }
        let rows = self.nodes[x].value.len() / d_in;
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(d_out);
        let mut out = vec![F::zero(); rows * d_out];
        kernels::matmul_nn(&self.nodes[x].value, &self.nodes[w].value, rows, d_in, d_out, &mut out);
        if let Some(bid) = b {
            let bias = &self.nodes[bid].value;
            for row in out.chunks_mut(d_out) {
                for (v, &bv) in row.iter_mut().zip(bias.iter()) {
                    *v += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bid) = b {
            inputs.push(bid);
        }
        let rg = self.needs_grad(&inputs);
        self.push(Op::Linear { x, w, b }, out_shape, out, rg, Vec::new(), "linear")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(NumericsError::shape(
                "add",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let out: Vec<F> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::Add { a, b }, shape, out, rg, Vec::new(), "add")
    }

    /// `x + table`, broadcasting `table` ([L, d]) over the leading axes of `x`.
    pub fn add_rows(&mut self, x: NodeId, table: NodeId) -> Result<NodeId, NumericsError> {
        let (sx, st) = (&self.nodes[x].shape, &self.nodes[table].shape);
        if st.len() != 2 || sx.len() < 2 || sx[sx.len() - 2..] != st[..] {
            return Err(NumericsError::shape("add_rows", format!("{:?} + {:?}", sx, st)));
        }
        let block = st[0] * st[1];
        let out: Vec<F> = self.nodes[x]
            .value
            .chunks(block)
            .flat_map(|chunk| {
                chunk.iter().zip(&self.nodes[table].value).map(|(&a, &b)| a + b)
            })
            .collect();
        let shape = sx.clone();
        let rg = self.needs_grad(&[x, table]);
        self.push(Op::AddRows { x, table }, shape, out, rg, Vec::new(), "add_rows")
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId, NumericsError> {
        let out: Vec<F> = self.nodes[x].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Scale { x, c }, shape, out, rg, Vec::new(), "scale")
    }

    /// Scales each index of the leading axis by its own factor (drop-path).
    pub fn row_scale(&mut self, x: NodeId, factors: Vec<F>) -> Result<NodeId, NumericsError> {
        let sx = &self.nodes[x].shape;
        if sx.is_empty() || sx[0] != factors.len() {
            return Err(NumericsError::shape(
                "row_scale",
                format!("{} factors for leading dim of {:?}", factors.len(), sx),
            ));
        }
        let block = self.nodes[x].value.len() / factors.len();
        let mut out = Vec::with_capacity(self.nodes[x].value.len());
        for (i, chunk) in self.nodes[x].value.chunks(block).enumerate() {
            out.extend(chunk.iter().map(|&v| v * factors[i]));
        }
        let shape = sx.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::RowScale { x, factors }, shape, out, rg, Vec::new(), "row_scale")
    }

    /// Softmax along `axis`; stabilized by max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let rank = self.nodes[x].shape.len();
        if axis >= rank {
            return Err(NumericsError::invalid(
                "softmax",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        if axis == rank - 1 {
            let width = *self.nodes[x].shape.last().unwrap();
            let mut out = self.nodes[x].value.clone();
            for row in out.chunks_mut(width) {
                kernels::softmax_row(row);
            }
            let shape = self.nodes[x].shape.clone();
            let rg = self.needs_grad(&[x]);
            self.push(Op::Softmax { x, axis }, shape, out, rg, Vec::new(), "softmax")
        } else {
            // Rotate the axis to the back, softmax there, rotate home.
            let mut to_back: Vec<usize> = (0..rank).filter(|&i| i != axis).collect();
            to_back.push(axis);
            let moved = self.permute(x, &to_back)?;
            let sm = self.softmax(moved, rank - 1)?;
            let mut home = vec![0usize; rank];
            for (new_pos, &old_axis) in to_back.iter().enumerate() {
                home[old_axis] = new_pos;
            }
            self.permute(sm, &home)
        }
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: F,
    ) -> Result<NodeId, NumericsError> {
        let d = *self.nodes[x].shape.last().ok_or_else(|| {
            NumericsError::shape("layernorm", "scalar input")
        })?;
        if self.nodes[gain].shape != [d] || self.nodes[bias].shape != [d] {
            return Err(NumericsError::shape(
                "layernorm",
                format!(
                    "gain {:?} / bias {:?} for last dim {}",
                    self.nodes[gain].shape, self.nodes[bias].shape, d
                ),
            ));
        }
        let rows = self.nodes[x].value.len() / d;
        let mut out = vec![F::zero(); rows * d];
        let mut saved = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let (mean, inv_std) = kernels::layernorm_row(
                &self.nodes[x].value[r * d..(r + 1) * d],
                &self.nodes[gain].value,
                &self.nodes[bias].value,
                eps,
                &mut out[r * d..(r + 1) * d],
            );
            saved.push(mean);
            saved.push(inv_std);
        }
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs_grad(&[x, gain, bias]);
        self.push(Op::LayerNorm { x, gain, bias, eps }, shape, out, rg, saved, "layernorm")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let out: Vec<F> = self.nodes[x].value.iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Gelu { x }, shape, out, rg, Vec::new(), "gelu")
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, NumericsError> {
        let shape = self.nodes[x].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::invalid(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, rank),
            ));
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_copy(&self.nodes[x].value, &shape, perm);
        let rg = self.needs_grad(&[x]);
        self.push(Op::Permute { x, perm: perm.to_vec() }, new_shape, out, rg, Vec::new(), "permute")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.len() {
            return Err(NumericsError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x].shape, shape),
            ));
        }
        let out = self.nodes[x].value.clone();
        let rg = self.needs_grad(&[x]);
        self.push(Op::Reshape { x }, shape, out, rg, Vec::new(), "reshape")
    }

    /// Concatenate along axis 1 of [B, L, d].
    pub fn concat_tokens(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(NumericsError::shape("concat_tokens", format!("{:?} ++ {:?}", sa, sb)));
        }
        let (batch, la, lb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Vec::with_capacity(batch * (la + lb) * d);
        for bi in 0..batch {
            out.extend_from_slice(&self.nodes[a].value[bi * la * d..(bi + 1) * la * d]);
            out.extend_from_slice(&self.nodes[b].value[bi * lb * d..(bi + 1) * lb * d]);
        }
        let shape = vec![batch, la + lb, d];
        let rg = self.needs_grad(&[a, b]);
        self.push(Op::ConcatTokens { a, b }, shape, out, rg, Vec::new(), "concat_tokens")
    }

    /// Per-batch token gather: `y[b, i, :] = x[b, idx[b][i], :]`.
    pub fn gather_tokens(
        &mut self,
        x: NodeId,
        idx: Vec<Vec<usize>>,
    ) -> Result<NodeId, NumericsError> {
        let sx = &self.nodes[x].shape;
        if sx.len() != 3 || idx.len() != sx[0] {
            return Err(NumericsError::shape(
                "gather_tokens",
                format!("{} index lists for {:?}", idx.len(), sx),
            ));
        }
        let (l, d) = (sx[1], sx[2]);
        let n = idx[0].len();
        if idx.iter().any(|v| v.len() != n) {
            return Err(NumericsError::invalid("gather_tokens", "ragged index lists"));
        }
        if idx.iter().flatten().any(|&i| i >= l) {
            return Err(NumericsError::invalid("gather_tokens", "token index out of range"));
        }
        let batch = sx[0];
        let mut out = Vec::with_capacity(batch * n * d);
        for (bi, list) in idx.iter().enumerate() {
            let base = bi * l * d;
            for &t in list {
                out.extend_from_slice(&self.nodes[x].value[base + t * d..base + (t + 1) * d]);
            }
        }
        let shape = vec![batch, n, d];
        let rg = self.needs_grad(&[x]);
        self.push(Op::GatherTokens { x, idx }, shape, out, rg, Vec::new(), "gather_tokens")
    }

    /// Token gather with one index list shared across the batch.
    pub fn gather_tokens_shared(
        &mut self,
        x: NodeId,
        idx: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let batch = *self.nodes[x]
            .shape
            .first()
            .ok_or_else(|| NumericsError::shape("gather_tokens", "scalar input"))?;
        self.gather_tokens(x, vec![idx.to_vec(); batch])
    }

    /// Embedding-style row lookup: `y[b, i, :] = table[idx[b][i], :]`.
    pub fn table_gather(
        &mut self,
        table: NodeId,
        idx: Vec<Vec<usize>>,
    ) -> Result<NodeId, NumericsError> {
        let st = &self.nodes[table].shape;
        if st.len() != 2 {
            return Err(NumericsError::shape("table_gather", format!("table {:?}", st)));
        }
        let (rows, d) = (st[0], st[1]);
        let n = idx.first().map(|v| v.len()).unwrap_or(0);
        if idx.iter().any(|v| v.len() != n) {
            return Err(NumericsError::invalid("table_gather", "ragged index lists"));
        }
        if idx.iter().flatten().any(|&i| i >= rows) {
            return Err(NumericsError::invalid("table_gather", "row index out of range"));
        }
        let batch = idx.len();
        let mut out = Vec::with_capacity(batch * n * d);
        for list in &idx {
            for &r in list {
                out.extend_from_slice(&self.nodes[table].value[r * d..(r + 1) * d]);
            }
        }
        let shape = vec![batch, n, d];
        let rg = self.needs_grad(&[table]);
        self.push(Op::TableGather { table, idx }, shape, out, rg, Vec::new(), "table_gather")
    }

    /// Tile a `[d]` vector into `[batch, n, d]` (cls / mask tokens).
    pub fn broadcast_token(
        &mut self,
        t: NodeId,
        batch: usize,
        n: usize,
    ) -> Result<NodeId, NumericsError> {
        let st = &self.nodes[t].shape;
        if st.len() != 1 {
            return Err(NumericsError::shape("broadcast_token", format!("{:?}", st)));
        }
        let d = st[0];
        let mut out = Vec::with_capacity(batch * n * d);
        for _ in 0..batch * n {
            out.extend_from_slice(&self.nodes[t].value);
        }
        let rg = self.needs_grad(&[t]);
        self.push(Op::BroadcastToken { t, batch, n }, vec![batch, n, d], out, rg, Vec::new(), "broadcast_token")
    }

    /// Mean over axis 1 of [B, L, d] (the GAP head).
    pub fn mean_tokens(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let sx = &self.nodes[x].shape;
        if sx.len() != 3 {
            return Err(NumericsError::shape("mean_tokens", format!("{:?}", sx)));
        }
        let (batch, l, d) = (sx[0], sx[1], sx[2]);
        if l == 0 {
            return Err(NumericsError::invalid("mean_tokens", "no tokens to pool"));
        }
        let inv = F::of_usize(l).recip();
        let mut out = vec![F::zero(); batch * d];
        for bi in 0..batch {
            for t in 0..l {
                let src = &self.nodes[x].value[(bi * l + t) * d..(bi * l + t + 1) * d];
                let dst = &mut out[bi * d..(bi + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.needs_grad(&[x]);
        self.push(Op::MeanTokens { x }, vec![batch, d], out, rg, Vec::new(), "mean_tokens")
    }

    /// Mean over the batch of `−Σ target·log softmax(logits)`; soft targets.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[F],
    ) -> Result<NodeId, NumericsError> {
        let sl = &self.nodes[logits].shape;
        if sl.len() != 2 || targets.len() != self.nodes[logits].value.len() {
            return Err(NumericsError::shape(
                "cross_entropy",
                format!("logits {:?}, targets len {}", sl, targets.len()),
            ));
        }
        let (batch, classes) = (sl[0], sl[1]);
        let tol = F::of_f64(1e-4);
        for (bi, row) in targets.chunks(classes).enumerate() {
            let sum: F = row.iter().copied().sum();
            if (sum - F::one()).abs() > tol {
                return Err(NumericsError::invalid(
                    "cross_entropy",
                    format!("target row {} sums to {}, expected 1", bi, sum),
                ));
            }
        }
        let mut probs = vec![F::zero(); batch * classes];
        let mut loss = F::zero();
        for bi in 0..batch {
            let row = &self.nodes[logits].value[bi * classes..(bi + 1) * classes];
            let t_row = &targets[bi * classes..(bi + 1) * classes];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[bi * classes + j] = e;
                sum += e;
            }
            let lse = max + sum.ln();
            let inv = sum.recip();
            for p in &mut probs[bi * classes..(bi + 1) * classes] {
                *p = *p * inv;
            }
            let mut dot = F::zero();
            for (&t, &v) in t_row.iter().zip(row) {
                dot += t * v;
            }
            loss += lse - dot;
        }
        loss = loss / F::of_usize(batch);
        let rg = self.needs_grad(&[logits]);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            vec![],
            vec![loss],
            rg,
            probs,
            "cross_entropy",
        )
    }

    /// Mean squared error over masked positions only. The mask addresses
    /// either every element (`mask.len() == numel`) or every position of the
    /// leading axes (`mask.len() * last_dim == numel`).
    pub fn mse_masked(
        &mut self,
        pred: NodeId,
        target: &[F],
        mask: &[bool],
    ) -> Result<NodeId, NumericsError> {
        let numel = self.nodes[pred].value.len();
        if target.len() != numel {
            return Err(NumericsError::shape(
                "mse_masked",
                format!("pred numel {}, target len {}", numel, target.len()),
            ));
        }
        let last = *self.nodes[pred].shape.last().unwrap_or(&1);
        let expand = if mask.len() == numel {
            1
        } else if mask.len() * last == numel {
            last
        } else {
            return Err(NumericsError::shape(
                "mse_masked",
                format!("mask len {} for pred numel {} (last dim {})", mask.len(), numel, last),
            ));
        };
        let count = mask.iter().filter(|&&m| m).count() * expand;
        if count == 0 {
            return Err(NumericsError::invalid("mse_masked", "mask selects no positions"));
        }
        let inv = F::of_usize(count).recip();
        let mut loss = F::zero();
        for (i, (&p, &t)) in self.nodes[pred].value.iter().zip(target).enumerate() {
            if mask[i / expand] {
                let d = p - t;
                loss += d * d;
            }
        }
        loss = loss * inv;
        let rg = self.needs_grad(&[pred]);
        self.push(
            Op::MseMasked { pred, target: target.to_vec(), mask: mask.to_vec(), count },
            vec![],
            vec![loss],
            rg,
            Vec::new(),
            "mse_masked",
        )
    }

    /// Reverse sweep from a scalar loss. Every `requires_grad` leaf reachable
    /// from `loss` receives its gradient; call once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.nodes[loss].value.len() != 1 {
            return Err(NumericsError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss].shape),
            ));
        }
        let n = self.nodes.len();
        self.nodes[loss].grad = Some(vec![F::one()]);
        for id in (0..n.min(loss + 1)).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<F> {
        let len = self.nodes[id].value.len();
        self.nodes[id].grad.get_or_insert_with(|| vec![F::zero(); len])
    }

    fn add_grad(&mut self, id: NodeId, g: &[F]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (dst, &src) in buf.iter_mut().zip(g) {
            *dst += src;
        }
    }

    fn step_backward(&mut self, id: NodeId) {
        let dy = self.nodes[id].grad.clone().expect("grad present");
        // Ops are matched by moving cheap metadata out; values are borrowed.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = &self.nodes[a].shape;
                let r = sa.len();
                let batch: usize = sa[..r - 2].iter().product();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = if trans_b { self.nodes[b].shape[r - 2] } else { self.nodes[b].shape[r - 1] };
                if self.nodes[a].requires_grad {
                    let mut da = vec![F::zero(); batch * m * k];
                    // dA = dC·Bᵀ (nn case) or dC·B (nt case)
                    kernels::bmm(&dy, &self.nodes[b].value, batch, m, n, k, !trans_b, &mut da);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let bsz = self.nodes[b].value.len() / batch;
                    let mut db = vec![F::zero(); batch * bsz];
                    for bi in 0..batch {
                        let dy_b = &dy[bi * m * n..(bi + 1) * m * n];
                        let a_b = &self.nodes[a].value[bi * m * k..(bi + 1) * m * k];
                        let db_b = &mut db[bi * bsz..(bi + 1) * bsz];
                        if trans_b {
                            // C = A·Bᵀ ⇒ dB = dCᵀ·A : tn with a=dy [m,n], b=A [m,k]
                            kernels::matmul_tn_acc(dy_b, a_b, n, m, k, db_b);
                        } else {
                            // dB = Aᵀ·dC : tn with a=A [m,k], b=dy [m,n]
                            kernels::matmul_tn_acc(a_b, dy_b, k, m, n, db_b);
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (d_in, d_out) = (self.nodes[w].shape[0], self.nodes[w].shape[1]);
                let rows = self.nodes[x].value.len() / d_in;
                if self.nodes[x].requires_grad {
                    let mut dx = vec![F::zero(); rows * d_in];
                    kernels::matmul_nt(&dy, &self.nodes[w].value, rows, d_out, d_in, &mut dx);
                    self.add_grad(x, &dx);
                }
                if self.nodes[w].requires_grad {
                    let mut dw = vec![F::zero(); d_in * d_out];
                    kernels::matmul_tn_acc(&self.nodes[x].value, &dy, d_in, rows, d_out, &mut dw);
                    self.add_grad(w, &dw);
                }
                if let Some(bid) = b {
                    if self.nodes[bid].requires_grad {
                        let mut db = vec![F::zero(); d_out];
                        for row in dy.chunks(d_out) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.add_grad(bid, &db);
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &dy);
                self.add_grad(b, &dy);
            }
            Op::AddRows { x, table } => {
                let (x, table) = (*x, *table);
                self.add_grad(x, &dy);
                if self.nodes[table].requires_grad {
                    let block = self.nodes[table].value.len();
                    let mut dt = vec![F::zero(); block];
                    for chunk in dy.chunks(block) {
                        for (d, &g) in dt.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<F> = dy.iter().map(|&g| g * c).collect();
                self.add_grad(x, &dx);
            }
            Op::RowScale { x, factors } => {
                let x = *x;
                let factors = factors.clone();
                let block = dy.len() / factors.len();
                let mut dx = Vec::with_capacity(dy.len());
                for (i, chunk) in dy.chunks(block).enumerate() {
                    dx.extend(chunk.iter().map(|&g| g * factors[i]));
                }
                self.add_grad(x, &dx);
            }
            Op::Softmax { x, .. } => {
                // Reaches here only for last-axis softmax; other axes are
                // recorded as permute∘softmax∘permute.
                let x = *x;
                let width = *self.nodes[id].shape.last().unwrap();
                let y = &self.nodes[id].value;
                let mut dx = vec![F::zero(); dy.len()];
                for r in 0..dy.len() / width {
                    let ys = &y[r * width..(r + 1) * width];
                    let gs = &dy[r * width..(r + 1) * width];
                    let mut dot = F::zero();
                    for (&yv, &gv) in ys.iter().zip(gs) {
                        dot += yv * gv;
                    }
                    for j in 0..width {
                        dx[r * width + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = *self.nodes[id].shape.last().unwrap();
                let rows = dy.len() / d;
                let inv_d = F::of_usize(d).recip();
                let mut dx = vec![F::zero(); dy.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let mean = self.nodes[id].saved[2 * r];
                    let inv_std = self.nodes[id].saved[2 * r + 1];
                    let xs = &self.nodes[x].value[r * d..(r + 1) * d];
                    let gs = &dy[r * d..(r + 1) * d];
                    let gains = &self.nodes[gain].value;
                    let mut sum_dyg = F::zero();
                    let mut sum_dyg_xhat = F::zero();
                    for j in 0..d {
                        let xhat = (xs[j] - mean) * inv_std;
                        let dyg = gs[j] * gains[j];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                        dgain[j] += gs[j] * xhat;
                        dbias[j] += gs[j];
                    }
                    let mean_dyg = sum_dyg * inv_d;
                    let mean_dyg_xhat = sum_dyg_xhat * inv_d;
                    for j in 0..d {
                        let xhat = (xs[j] - mean) * inv_std;
                        let dyg = gs[j] * gains[j];
                        dx[r * d + j] = inv_std * (dyg - mean_dyg - xhat * mean_dyg_xhat);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dgain);
                self.add_grad(bias, &dbias);
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<F> = self.nodes[x]
                    .value
                    .iter()
                    .zip(&dy)
                    .map(|(&xv, &g)| g * kernels::gelu_grad(xv))
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Permute { x, perm } => {
                let x = *x;
                let rank = perm.len();
                let mut inv = vec![0usize; rank];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = permute_copy(&dy, &self.nodes[id].shape, &inv);
                self.add_grad(x, &dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.add_grad(x, &dy);
            }
            Op::ConcatTokens { a, b } => {
                let (a, b) = (*a, *b);
                let (la, d) = (self.nodes[a].shape[1], self.nodes[a].shape[2]);
                let lb = self.nodes[b].shape[1];
                let batch = self.nodes[a].shape[0];
                let mut da = vec![F::zero(); batch * la * d];
                let mut db = vec![F::zero(); batch * lb * d];
                for bi in 0..batch {
                    let row = &dy[bi * (la + lb) * d..(bi + 1) * (la + lb) * d];
                    da[bi * la * d..(bi + 1) * la * d].copy_from_slice(&row[..la * d]);
                    db[bi * lb * d..(bi + 1) * lb * d].copy_from_slice(&row[la * d..]);
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::GatherTokens { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let (l, d) = (self.nodes[x].shape[1], self.nodes[x].shape[2]);
                let mut dx = vec![F::zero(); self.nodes[x].value.len()];
                for (bi, list) in idx.iter().enumerate() {
                    for (i, &t) in list.iter().enumerate() {
                        let src = &dy[(bi * list.len() + i) * d..(bi * list.len() + i + 1) * d];
                        let dst = &mut dx[(bi * l + t) * d..(bi * l + t + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::TableGather { table, idx } => {
                let table = *table;
                let idx = idx.clone();
                let d = self.nodes[table].shape[1];
                let mut dt = vec![F::zero(); self.nodes[table].value.len()];
                let n = idx.first().map(|v| v.len()).unwrap_or(0);
                for (bi, list) in idx.iter().enumerate() {
                    for (i, &r) in list.iter().enumerate() {
                        let src = &dy[(bi * n + i) * d..(bi * n + i + 1) * d];
                        let dst = &mut dt[r * d..(r + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::BroadcastToken { t, batch, n } => {
                let (t, batch, n) = (*t, *batch, *n);
                let d = self.nodes[t].value.len();
                let mut dt = vec![F::zero(); d];
                for i in 0..batch * n {
                    for (o, &g) in dt.iter_mut().zip(&dy[i * d..(i + 1) * d]) {
                        *o += g;
                    }
                }
                self.add_grad(t, &dt);
            }
            Op::MeanTokens { x } => {
                let x = *x;
                let (batch, l, d) = (
                    self.nodes[x].shape[0],
                    self.nodes[x].shape[1],
                    self.nodes[x].shape[2],
                );
                let inv = F::of_usize(l).recip();
                let mut dx = vec![F::zero(); batch * l * d];
                for bi in 0..batch {
                    let g_row = &dy[bi * d..(bi + 1) * d];
                    for t in 0..l {
                        let dst = &mut dx[(bi * l + t) * d..(bi * l + t + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(g_row) {
                            *o = g * inv;
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let batch = self.nodes[logits].shape[0];
                let scale = dy[0] / F::of_usize(batch);
                let dx: Vec<F> = self.nodes[id]
                    .saved
                    .iter()
                    .zip(&targets)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                self.add_grad(logits, &dx);
            }
            Op::MseMasked { pred, target, mask, count } => {
                let pred = *pred;
                let (target, mask, count) = (target.clone(), mask.clone(), *count);
                let expand = self.nodes[pred].value.len() / mask.len();
                let two = F::of_f64(2.0);
                let scale = dy[0] * two / F::of_usize(count);
                let dx: Vec<F> = self.nodes[pred]
                    .value
                    .iter()
                    .zip(&target)
                    .enumerate()
                    .map(|(i, (&p, &t))| {
                        if mask[i / expand] {
                            (p - t) * scale
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.add_grad(pred, &dx);
            }
        }
    }

    /// Push accumulated leaf gradients back into the parameter store.
    pub fn accumulate_grads(&self, store: &mut ParamStore<F>) {
        for &(node, pid) in &self.param_leaves {
            if let Some(g) = self.nodes[node].grad.as_deref() {
                store.get_mut(pid).tensor.accumulate_grad(g);
            }
        }
    }
}

fn permute_copy<F: Real>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let old_strides = row_major_strides(shape);
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each axis of the destination
    let src_strides: Vec<usize> = perm.iter().map(|&p| old_strides[p]).collect();
    let mut out = vec![F::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // odometer increment
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            src += src_strides[axis];
            if coords[axis] < new_shape[axis] {
                break;
            }
            src -= src_strides[axis] * new_shape[axis];
            coords[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn matmul_identity_and_hand_checked() {
        let mut g = graph();
        let eye = g
            .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a = g
            .constant(vec![3, 3], (1..=9).map(|v| v as f64).collect())
            .unwrap();
        let prod = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(prod), g.value(a));

        let m = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = g.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let mv = g.matmul(m, v).unwrap();
        assert_eq!(g.value(mv), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let mut g = graph();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_associativity_exact_for_small_integers() {
        let mut g: Graph<f32> = Graph::new();
        let mut rng = crate::rng::stream(11, "assoc");
        use rand::Rng;
        let mk = |g: &mut Graph<f32>, rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
            let data: Vec<f32> = (0..r * c).map(|_| rng.gen_range(-3i32..=3) as f32).collect();
            g.constant(vec![r, c], data).unwrap()
        };
        let a = mk(&mut g, &mut rng, 4, 3);
        let b = mk(&mut g, &mut rng, 3, 5);
        let c = mk(&mut g, &mut rng, 5, 2);
        let ab = g.matmul(a, b).unwrap();
        let ab_c = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let a_bc = g.matmul(a, bc).unwrap();
        assert_eq!(g.value(ab_c), g.value(a_bc));
    }

    #[test]
    fn softmax_rows_per_spec() {
        let mut g = graph();
        let x = g.variable(vec![2, 2], vec![5.0, 5.0, 0.0, 3.0f64.ln()]).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert!((v[2] - 0.25).abs() < 1e-12);
        assert!((v[3] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_non_last_axis_matches_transposed() {
        let mut g = graph();
        let data = vec![0.3, -1.0, 2.0, 0.7, 0.0, 1.5];
        let x = g.constant(vec![2, 3], data.clone()).unwrap();
        let y = g.softmax(x, 0).unwrap();
        // column sums must be 1
        let v = g.value(y);
        for c in 0..3 {
            assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero_and_unit_variance() {
        let mut g = graph();
        let x = g.constant(vec![1, 4], vec![2.5; 4]).unwrap();
        let gain = g.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = g.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = g.layernorm(x, gain, bias, 1e-6).unwrap();
        for &v in g.value(y) {
            assert!(v.abs() < 1e-3);
        }

        let x2 = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let gain3 = g.constant(vec![3], vec![1.0; 3]).unwrap();
        let bias3 = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let y2 = g.layernorm(x2, gain3, bias3, 0.0).unwrap();
        let v = g.value(y2);
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = graph();
        // uniform logits, C=4 -> ln 4 for any valid target
        let logits = g.variable(vec![1, 4], vec![0.2; 4]).unwrap();
        let loss = g.cross_entropy(logits, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((g.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-9);

        // one-hot on argmax with huge separation -> ~0
        let logits2 = g.variable(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        let loss2 = g.cross_entropy(logits2, &[1.0, 0.0, 0.0]).unwrap();
        assert!(g.scalar_value(loss2) < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_non_simplex_targets() {
        let mut g = graph();
        let logits = g.variable(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(g.cross_entropy(logits, &[0.9, 0.3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_targets() {
        let mut g = graph();
        let logits = g.variable(vec![2, 3], vec![0.5, -0.2, 1.0, 0.0, 0.3, -1.0]).unwrap();
        let targets = [0.2, 0.5, 0.3, 1.0, 0.0, 0.0];
        let loss = g.cross_entropy(logits, &targets).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        // independent softmax
        for b in 0..2 {
            let row = &g.value(logits)[b * 3..(b + 1) * 3];
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            for j in 0..3 {
                let expect = (ex[j] / s - targets[b * 3 + j]) / 2.0;
                assert!((grad[b * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_masked_closed_forms_and_empty_mask() {
        let mut g = graph();
        let pred = g.variable(vec![2], vec![1.0, 4.0]).unwrap();
        let loss = g.mse_masked(pred, &[0.0, 1.0], &[true, true]).unwrap();
        assert!((g.scalar_value(loss) - 5.0).abs() < 1e-12);

        let pred2 = g.variable(vec![2], vec![1.0, 4.0]).unwrap();
        let same = g.mse_masked(pred2, &[1.0, 4.0], &[true, true]).unwrap();
        assert_eq!(g.scalar_value(same), 0.0);

        let pred3 = g.variable(vec![2], vec![1.0, 4.0]).unwrap();
        assert!(g.mse_masked(pred3, &[0.0, 0.0], &[false, false]).is_err());
    }

    #[test]
    fn add_backward_splits_identically() {
        let mut g = graph();
        let a = g.variable(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = g.variable(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.mse_masked(s, &[0.0, 0.0, 0.0], &[true, true, true]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), g.grad(b).unwrap());
    }

    #[test]
    fn non_finite_forward_is_rejected_with_op_name() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.variable(vec![2], vec![1e30, 1e30]).unwrap();
        let sq = g.mse_masked(x, &[-1e30, -1e30], &[true, true]);
        match sq {
            Err(NumericsError::NonFinite { op, .. }) => assert_eq!(op, "mse_masked"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn gather_scatter_round_trip_gradient() {
        let mut g = graph();
        let x = g.variable(vec![1, 4, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let picked = g.gather_tokens(x, vec![vec![3, 1]]).unwrap();
        assert_eq!(g.value(picked), &[6.0, 7.0, 2.0, 3.0]);
        let loss = g
            .mse_masked(picked, &[0.0; 4], &[true, true, true, true])
            .unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        // untouched tokens keep zero gradient
        assert_eq!(&grad[0..2], &[0.0, 0.0]);
        assert_eq!(&grad[4..6], &[0.0, 0.0]);
        assert!(grad[2] != 0.0 && grad[6] != 0.0);
    }

    #[test]
    fn permute_round_trip_restores_data() {
        let mut g = graph();
        let x = g
            .variable(vec![2, 3, 4], (0..24).map(|v| v as f64).collect())
            .unwrap();
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn linear_zero_weight_broadcasts_bias() {
        let mut g = graph();
        let x = g.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let w = g.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2], vec![0.5, -1.5]).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[0.5, -1.5, 0.5, -1.5]);
    }
}
