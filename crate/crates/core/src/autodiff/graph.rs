use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm, MatView};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool, plan: MatMulPlan },
    Add { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Softmax { a: usize },
    MaskedSoftmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: usize },
    MaskedRowMean { x: usize, weights: Vec<f64>, len: usize },
    Transpose { a: usize },
    Concat { parts: Vec<usize>, axis_lens: Vec<usize>, outer: usize, inner: usize },
    Slice { a: usize, outer: usize, inner: usize, src_len: usize, start: usize, len: usize },
    Dropout { a: usize, keep: Vec<f64> },
    L2Normalize { a: usize, norms: Vec<f64> },
    Gather { table: usize, ids: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    Reshape { a: usize },
    SplitHeads { a: usize, batch: usize, len: usize, heads: usize },
    MergeHeads { a: usize, batch: usize, len: usize, heads: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct MatMulPlan {
    batch: usize,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
    m: usize,
    n: usize,
    b_batched: bool,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded tensor operations supporting one reverse sweep.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumer and the tape is acyclic by construction. Every op checks its
/// output for non-finite values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_leaf(t.into(), false)
    }

    /// A leaf whose gradient is filled by [`Graph::backward`].
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.push_leaf(t.into(), true)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the differentiated loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` optionally transposes the last two axes.
    ///
    /// Supported layouts: `[.., m, k] @ [k, n]` (leading axes of `a` are
    /// flattened), `[m, k]^T`-style 2-D products, and batched
    /// `[batch, m, k] @ [batch, k, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ash, bsh) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        let err = || Error::shape("matmul", &ash, &bsh);
        let plan = match (ash.len(), bsh.len()) {
            (an, 2) if an >= 2 => {
                let (b_rows, b_cols) = (bsh[0], bsh[1]);
                let (k, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
                if ta {
                    if an != 2 || ash[0] != k {
                        return Err(err());
                    }
                    MatMulPlan { batch: 1, a_rows: ash[0], a_cols: ash[1], b_rows, b_cols, m: ash[1], n, b_batched: false }
                } else {
                    let a_cols = ash[an - 1];
                    if a_cols != k {
                        return Err(err());
                    }
                    let a_rows = ash[..an - 1].iter().product();
                    MatMulPlan { batch: 1, a_rows, a_cols, b_rows, b_cols, m: a_rows, n, b_batched: false }
                }
            }
            (3, 3) => {
                if ash[0] != bsh[0] {
                    return Err(err());
                }
                let (a_rows, a_cols, b_rows, b_cols) = (ash[1], ash[2], bsh[1], bsh[2]);
                let (m, ka) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
                let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
                if ka != kb {
                    return Err(err());
                }
                MatMulPlan { batch: ash[0], a_rows, a_cols, b_rows, b_cols, m, n, b_batched: true }
            }
            _ => return Err(err()),
        };
        let out_shape = if plan.b_batched {
            vec![plan.batch, plan.m, plan.n]
        } else if ta {
            vec![plan.m, plan.n]
        } else {
            let mut s = ash[..ash.len() - 1].to_vec();
            s.push(plan.n);
            s
        };
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        let (av, bv) = (self.val(a).data(), self.val(b).data());
        for bi in 0..plan.batch {
            let (ao, bo, co) = plan.offsets(bi);
            gemm(
                &mut out,
                MatView::row_major(plan.m, plan.n, co),
                av,
                MatView::row_major(plan.a_rows, plan.a_cols, ao).transposed_if(ta),
                bv,
                MatView::row_major(plan.b_rows, plan.b_cols, bo).transposed_if(tb),
                0.0,
            );
        }
        let value = Tensor::from_parts(out_shape, out);
        self.push("matmul", value, Op::MatMul { a: a.0, b: b.0, ta, tb, plan }, &[a.0, b.0])
    }

    /// Elementwise sum of equal shapes, or `a + bias` with `bias` broadcast
    /// over the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        if at.shape() == bt.shape() {
            let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
            let value = Tensor::from_parts(at.shape().to_vec(), data);
            return self.push("add", value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]);
        }
        if bt.ndim() == 1 && at.ndim() >= 1 && at.last_dim() == bt.numel() {
            let d = bt.numel();
            let bias = bt.data();
            let data = at.data().iter().enumerate().map(|(i, x)| x + bias[i % d]).collect();
            let value = Tensor::from_parts(at.shape().to_vec(), data);
            return self.push("add", value, Op::AddBias { a: a.0, bias: b.0 }, &[a.0, b.0]);
        }
        Err(Error::shape("add", at.shape(), bt.shape()))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.val(a), self.val(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape("mul", at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(at.shape().to_vec(), data);
        self.push("mul", value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let at = self.val(a);
        let data = at.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_parts(at.shape().to_vec(), data);
        self.push("scale", value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let at = self.val(a);
        let d = at.last_dim();
        let mut out = at.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_row(row, None);
            }
        }
        let value = Tensor::from_parts(at.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Softmax over the last axis where positions with `mask == 0` are
    /// treated as negative infinity.
    ///
    /// `mask` holds `groups x last_dim` entries; the rows of `a` are split
    /// into `groups` equal consecutive runs and run `g` uses mask row `g`.
    pub fn masked_softmax(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let at = self.val(a);
        let d = at.last_dim();
        let rows = at.rows();
        if d == 0 || !mask.len().is_multiple_of(d) || mask.is_empty() || !rows.is_multiple_of(mask.len() / d) {
            return Err(Error::shape("masked_softmax", at.shape(), &[mask.len()]));
        }
        let groups = mask.len() / d;
        let per = rows / groups;
        for (g, m) in mask.chunks(d).enumerate() {
            if !m.iter().any(|&v| v != 0.0) {
                return Err(Error::EmptySequence { row: g });
            }
        }
        let mut out = at.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let g = r / per;
            softmax_row(row, Some(&mask[g * d..(g + 1) * d]));
        }
        let value = Tensor::from_parts(at.shape().to_vec(), out);
        self.push("masked_softmax", value, Op::MaskedSoftmax { a: a.0 }, &[a.0])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xt, gt, bt) = (self.val(x), self.val(gamma), self.val(beta));
        let d = xt.last_dim();
        if gt.shape() != [d] || bt.shape() != [d] {
            return Err(Error::shape("layer_norm", xt.shape(), gt.shape()));
        }
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.numel()];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gt.data()[j] + bt.data()[j];
            }
        }
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let at = self.val(a);
        let data = at
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let value = Tensor::from_parts(at.shape().to_vec(), data);
        self.push("gelu", value, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Mean over the second-to-last axis restricted to rows whose mask entry
    /// is 1. `x: [.., L, d]`, `mask: [.., L]` (flattened) gives `[.., d]`.
    pub fn masked_row_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xt = self.val(x);
        if xt.ndim() < 2 {
            return Err(Error::shape("masked_row_mean", xt.shape(), &[mask.len()]));
        }
        let nd = xt.ndim();
        let (len, d) = (xt.shape()[nd - 2], xt.shape()[nd - 1]);
        let groups: usize = xt.shape()[..nd - 2].iter().product();
        if mask.len() != groups * len || mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::shape("masked_row_mean", xt.shape(), &[mask.len()]));
        }
        let mut weights = vec![0.0; groups];
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let count = mask[g * len..(g + 1) * len].iter().filter(|&&m| m == 1.0).count();
            if count == 0 {
                return Err(Error::EmptySequence { row: g });
            }
            let acc = &mut out[g * d..(g + 1) * d];
            for l in 0..len {
                if mask[g * len + l] == 1.0 {
                    let row = xt.row(g * len + l);
                    for (o, v) in acc.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            for o in acc.iter_mut() {
                *o /= count as f64;
            }
            weights[g] = 1.0 / count as f64;
        }
        // Per-position weight used by the backward pass.
        let weights: Vec<f64> = (0..groups * len).map(|i| mask[i] * weights[i / len]).collect();
        let mut shape = xt.shape()[..nd - 2].to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, out);
        self.push("masked_row_mean", value, Op::MaskedRowMean { x: x.0, weights, len }, &[x.0])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let at = self.val(a);
        if at.ndim() < 2 {
            return Err(Error::shape("transpose", at.shape(), &[]));
        }
        let nd = at.ndim();
        let (r, c) = (at.shape()[nd - 2], at.shape()[nd - 1]);
        let mut out = vec![0.0; at.numel()];
        for (bi, block) in at.data().chunks(r * c.max(1)).enumerate() {
            let base = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = block[i * c + j];
                }
            }
        }
        let mut shape = at.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let value = Tensor::from_parts(shape, out);
        self.push("transpose", value, Op::Transpose { a: a.0 }, &[a.0])
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.val(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.val(*p).shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &base, s));
            }
            axis_lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = axis_lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&axis_lens) {
                let d = self.val(*p).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", value, Op::Concat { parts: ids.clone(), axis_lens, outer, inner }, &ids)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let at = self.val(a);
        let s = at.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape("slice", s, &[axis, start, end]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let (src_len, len) = (s[axis], end - start);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * src_len + start) * inner;
            out.extend_from_slice(&at.data()[from..from + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        self.push("slice", value, Op::Slice { a: a.0, outer, inner, src_len, start, len }, &[a.0])
    }

    /// Inverted dropout with drop probability `p`. `p == 0` is the identity
    /// and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let at = self.val(a);
        let keep: Vec<f64> = (0..at.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect();
        let data = at.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        let value = Tensor::from_parts(at.shape().to_vec(), data);
        self.push("dropout", value, Op::Dropout { a: a.0, keep }, &[a.0])
    }

    /// Scale every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let at = self.val(a);
        let d = at.last_dim();
        let rows = at.rows();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; at.numel()];
        for r in 0..rows {
            let row = at.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm { row: r });
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let value = Tensor::from_parts(at.shape().to_vec(), out);
        self.push("l2_normalize", value, Op::L2Normalize { a: a.0, norms }, &[a.0])
    }

    /// Rows of a `[vocab, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        if tt.ndim() != 2 {
            return Err(Error::shape("gather", tt.shape(), &[ids.len()]));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::VocabRange { id, vocab_size: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        self.push("gather", value, Op::Gather { table: table.0, ids: ids.to_vec() }, &[table.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let at = self.val(a);
        if at.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = at.data().iter().sum::<f64>() / at.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// `[B, L, H*dh] -> [B*H, L, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let at = self.val(a);
        let s = at.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", s, &[heads]));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut out = vec![0.0; at.numel()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src = (bi * l + li) * d + h * dh;
                    let dst = ((bi * heads + h) * l + li) * dh;
                    out[dst..dst + dh].copy_from_slice(&at.data()[src..src + dh]);
                }
            }
        }
        let value = Tensor::from_parts(vec![b * heads, l, dh], out);
        self.push("split_heads", value, Op::SplitHeads { a: a.0, batch: b, len: l, heads }, &[a.0])
    }

    /// `[B*H, L, dh] -> [B, L, H*dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let at = self.val(a);
        let s = at.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", s, &[heads]));
        }
        let (bh, l, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = dh * heads;
        let mut out = vec![0.0; at.numel()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let dst = (bi * l + li) * d + h * dh;
                    let src = ((bi * heads + h) * l + li) * dh;
                    out[dst..dst + dh].copy_from_slice(&at.data()[src..src + dh]);
                }
            }
        }
        let value = Tensor::from_parts(vec![b, l, d], out);
        self.push("merge_heads", value, Op::MergeHeads { a: a.0, batch: b, len: l, heads }, &[a.0])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.val(logits);
        if lt.ndim() != 2 || lt.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", lt.shape(), &[targets.len()]));
        }
        let c = lt.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", lt.shape(), &[t]));
        }
        let mut probs = lt.data().to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[r];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // Sum the non-target terms apart so a dominant target keeps full
            // relative precision through ln_1p.
            let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, v)| (v - max).exp()).sum();
            let own = (row[t] - max).exp();
            total += if row[t] == max { rest.ln_1p() } else { max - row[t] + (own + rest).ln() };
            let lse = max + (own + rest).ln();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            &[logits.0],
        )
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Fill gradients of the scalar `loss` for every leaf that requires them.
    ///
    /// A graph can be differentiated once; intermediate gradients are
    /// released as the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::StaleGraph);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.differentiated = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = (0..n).map(|_| None).collect();
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(nodes, &mut grads, node, &g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| nodes[i].requires_grad && matches!(nodes[i].op, Op::Leaf))
                    .map(|g| Tensor::from_parts(nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(())
    }
}

impl MatMulPlan {
    fn offsets(&self, bi: usize) -> (usize, usize, usize) {
        let bo = if self.b_batched { bi * self.b_rows * self.b_cols } else { 0 };
        (bi * self.a_rows * self.a_cols, bo, bi * self.m * self.n)
    }
}

fn softmax_row(row: &mut [f64], mask: Option<&[f64]>) {
    let on = |j: usize| mask.is_none_or(|m| m[j] != 0.0);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if on(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if on(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let y = node.value.data();
    let value = |id: usize| nodes[id].value.as_ref();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb, plan } => {
            let (av, bv) = (value(*a).data(), value(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for bi in 0..plan.batch {
                    let (ao, bo, co) = plan.offsets(bi);
                    let b_view = MatView::row_major(plan.b_rows, plan.b_cols, bo).transposed_if(*tb);
                    gemm(
                        ga,
                        MatView::row_major(plan.a_rows, plan.a_cols, ao).transposed_if(*ta),
                        g,
                        MatView::row_major(plan.m, plan.n, co),
                        bv,
                        b_view.t(),
                        1.0,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for bi in 0..plan.batch {
                    let (ao, bo, co) = plan.offsets(bi);
                    let a_view = MatView::row_major(plan.a_rows, plan.a_cols, ao).transposed_if(*ta);
                    gemm(
                        gb,
                        MatView::row_major(plan.b_rows, plan.b_cols, bo).transposed_if(*tb),
                        av,
                        a_view.t(),
                        g,
                        MatView::row_major(plan.m, plan.n, co),
                        1.0,
                    );
                }
            }
        }
        Op::Add { a, b } => {
            for id in [*a, *b] {
                if let Some(ga) = slot(nodes, grads, id) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::AddBias { a, bias } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                let d = gb.len();
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (value(*a).data(), value(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
            }
        }
        Op::Softmax { a } | Op::MaskedSoftmax { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = node.value.last_dim();
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = node.value.last_dim();
            let gam = value(*gamma).data();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dh = vec![0.0; d];
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dh[j] = gr[j] * gam[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let av = value(*a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..ga.len() {
                    let x = av[i];
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                }
            }
        }
        Op::MaskedRowMean { x, weights, len } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let d = node.value.last_dim();
                for (pos, &w) in weights.iter().enumerate() {
                    if w != 0.0 {
                        let grow = &g[(pos / len) * d..(pos / len + 1) * d];
                        for (o, v) in gx[pos * d..(pos + 1) * d].iter_mut().zip(grow) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        Op::Transpose { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let s = node.value.shape();
                let nd = s.len();
                // Output is [.., c, r]; the input was [.., r, c].
                let (c, r) = (s[nd - 2], s[nd - 1]);
                let block = (r * c).max(1);
                for bi in 0..g.len() / block {
                    let base = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            ga[base + i * c + j] += g[base + j * r + i];
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis_lens, outer, inner } => {
            let total: usize = axis_lens.iter().sum();
            let mut offset = 0;
            for (&p, &l) in parts.iter().zip(axis_lens) {
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * l * inner;
                        for k in 0..l * inner {
                            gp[dst + k] += g[src + k];
                        }
                    }
                }
                offset += l;
            }
        }
        Op::Slice { a, outer, inner, src_len, start, len } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..*outer {
                    let dst = (o * src_len + start) * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        ga[dst + k] += g[src + k];
                    }
                }
            }
        }
        Op::Dropout { a, keep } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * keep[i];
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = node.value.last_dim();
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        ga[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let d = node.value.last_dim();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::SplitHeads { a, batch, len, heads } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let dh = node.value.last_dim();
                let d = dh * heads;
                for bi in 0..*batch {
                    for li in 0..*len {
                        for h in 0..*heads {
                            let src = (bi * len + li) * d + h * dh;
                            let dst = ((bi * heads + h) * len + li) * dh;
                            for e in 0..dh {
                                ga[src + e] += g[dst + e];
                            }
                        }
                    }
                }
            }
        }
        Op::MergeHeads { a, batch, len, heads } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let d = node.value.last_dim();
                let dh = d / heads;
                for bi in 0..*batch {
                    for li in 0..*len {
                        for h in 0..*heads {
                            let dst = (bi * len + li) * d + h * dh;
                            let src = ((bi * heads + h) * len + li) * dh;
                            for e in 0..dh {
                                ga[src + e] += g[dst + e];
                            }
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let c = probs.len() / targets.len();
                let s = g[0] / targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}
