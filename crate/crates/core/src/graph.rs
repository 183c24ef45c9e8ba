//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is recorded fresh for every forward pass. Nodes are appended
//! in evaluation order, so node ids are already a topological order and
//! backward is a single descending sweep.
//!
//! Broadcasting is limited to two explicit forms: a per-feature vector added
//! to every row (`add_bias`), and a per-sample `[B×D]` tensor expanded across
//! the `T` token rows of each sample (`add_expand`, `mul_expand`).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rope::{self, RotaryTable};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Fixed dimensions of a fused multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddExpand(Var, Var),
    MulExpand(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    IndexSelect(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    Gather(Var, Arc<[usize]>),
    SliceCols(Var, usize),
    GatherEntries(Var, Arc<[(usize, usize)]>),
    ScaleRows(Var, Var),
    MaskedNormalize(Var, Arc<[bool]>),
    Sum(Var),
    Mean(Var),
    Rope {
        x: Var,
        table: Arc<RotaryTable>,
        positions: Arc<[(usize, usize)]>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::AddExpand(..) => "add_expand",
            Op::MulExpand(..) => "mul_expand",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape(..) => "reshape",
            Op::IndexSelect(..) => "index_select",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Gather(..) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherEntries(..) => "gather_entries",
            Op::ScaleRows(..) => "scale_rows",
            Op::MaskedNormalize(..) => "masked_normalize",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Persistent gradient, only kept on leaves that require it.
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const DEFAULT_EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Adds a leaf. Leaves requiring grad start with a zero gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape().to_vec()));
        self.nodes.push(Node {
            value,
            requires_grad,
            grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::InvalidShape(format!("{op} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, &[a], Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, &[a], Op::Scale(a, factor))
    }

    /// `x[N×D] + b[D]`, the bias repeated on every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.matrix(x, "add_bias")?;
        if self.value(b).numel() != d {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, &[x, b], Op::AddBias(x, b)))
    }

    fn expand_dims(&self, x: Var, s: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let (n, d) = self.matrix(x, op)?;
        let (b, ds) = self.matrix(s, op)?;
        if ds != d || b == 0 || n % b != 0 {
            return Err(Error::shape(op, self.shape(x), self.shape(s)));
        }
        Ok((b, n / b, d))
    }

    /// `x[B·T×D] + s[B×D]`, each sample's row added to its `T` token rows.
    pub fn add_expand(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, t, d) = self.expand_dims(x, s, "add_expand")?;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let srow = &sv[(r / t) * d..(r / t + 1) * d];
            for (o, a) in row.iter_mut().zip(srow) {
                *o += a;
            }
        }
        Ok(self.push(out, &[x, s], Op::AddExpand(x, s)))
    }

    /// `x[B·T×D] ⊙ s[B×D]`, expanded the same way as [`Graph::add_expand`].
    pub fn mul_expand(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, t, d) = self.expand_dims(x, s, "mul_expand")?;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let srow = &sv[(r / t) * d..(r / t + 1) * d];
            for (o, a) in row.iter_mut().zip(srow) {
                *o *= a;
            }
        }
        Ok(self.push(out, &[x, s], Op::MulExpand(x, s)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, &[x], Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, &[x], Op::Silu(x))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).as_matrix();
        if c == 0 {
            return Err(Error::EmptyReduction("softmax_rows"));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(out, &[x], Op::SoftmaxRows(x)))
    }

    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.value(x).as_matrix();
        if self.value(weight).numel() != d {
            return Err(Error::shape("rmsnorm", self.shape(x), self.shape(weight)));
        }
        let w = self.value(weight).data().to_vec();
        let mut out = self.value(x).clone();
        let mut inv_rms = Vec::new();
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for (o, wv) in row.iter_mut().zip(&w) {
                *o *= r * wv;
            }
        }
        Ok(self.push(out, &[x, weight], Op::RmsNorm { x, weight, inv_rms }))
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layernorm(
        &mut self,
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let (_, d) = self.value(x).as_matrix();
        for p in [scale, shift].into_iter().flatten() {
            if self.value(p).numel() != d {
                return Err(Error::shape("layernorm", self.shape(x), self.shape(p)));
            }
        }
        let mut normalized = self.value(x).data().to_vec();
        let mut inv_std = Vec::new();
        for row in normalized.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
        }
        let mut out = Tensor::new(self.shape(x).to_vec(), normalized.clone())?;
        if let Some(s) = scale {
            let sv = self.value(s).data().to_vec();
            for row in out.data_mut().chunks_mut(d) {
                row.iter_mut().zip(&sv).for_each(|(o, a)| *o *= a);
            }
        }
        if let Some(s) = shift {
            let sv = self.value(s).data().to_vec();
            for row in out.data_mut().chunks_mut(d) {
                row.iter_mut().zip(&sv).for_each(|(o, a)| *o += a);
            }
        }
        let mut inputs = vec![x];
        inputs.extend(scale);
        inputs.extend(shift);
        Ok(self.push(
            out,
            &inputs,
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    /// Picks rows of a matrix (or entries of a vector) by index.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).as_matrix();
        if rows.is_empty() {
            return Err(Error::InvalidShape("index_select with no indices".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    op: "index_select",
                    index: r,
                    extent: n,
                });
            }
            data.extend_from_slice(self.value(x).row(r));
        }
        let out = Tensor::new([rows.len(), d], data)?;
        Ok(self.push(out, &[x], Op::IndexSelect(x, rows.into())))
    }

    /// Adds row `i` of `src` into row `rows[i]` of a zero `[n_rows×D]` result.
    pub fn scatter_add(&mut self, src: Var, rows: &[usize], n_rows: usize) -> Result<Var> {
        let (n, d) = self.value(src).as_matrix();
        if n != rows.len() {
            return Err(Error::shape("scatter_add", self.shape(src), &[rows.len()]));
        }
        let mut out = Tensor::zeros([n_rows, d]);
        for (i, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::Index {
                    op: "scatter_add",
                    index: r,
                    extent: n_rows,
                });
            }
            let s = self.value(src).row(i);
            for (o, v) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(s) {
                *o += v;
            }
        }
        Ok(self.push(out, &[src], Op::ScatterAdd(src, rows.into())))
    }

    /// Flat gather: `out[i] = x[source[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, source: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = source.iter().find(|&&s| s >= n) {
            return Err(Error::Index {
                op: "gather",
                index: bad,
                extent: n,
            });
        }
        let xv = self.value(x).data();
        let out = Tensor::new(shape, source.iter().map(|&s| xv[s]).collect())?;
        Ok(self.push(out, &[x], Op::Gather(x, source)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::InvalidShape(format!(
                "slice_cols {start}..{} of width {d}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let data = (0..n)
            .flat_map(|r| xv[r * d + start..r * d + start + len].iter().copied())
            .collect();
        let out = Tensor::new([n, len], data)?;
        Ok(self.push(out, &[x], Op::SliceCols(x, start)))
    }

    /// Picks individual `(row, col)` entries of a matrix into a vector.
    pub fn gather_entries(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = self.matrix(x, "gather_entries")?;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= n || c >= d {
                return Err(Error::Index {
                    op: "gather_entries",
                    index: r * d + c,
                    extent: n * d,
                });
            }
            data.push(xv[r * d + c]);
        }
        let out = Tensor::new([entries.len()], data)?;
        Ok(self.push(out, &[x], Op::GatherEntries(x, entries.into())))
    }

    /// Multiplies row `i` of `x[N×D]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.value(x).as_matrix();
        if self.value(w).numel() != n {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(w)));
        }
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).clone();
        for (row, a) in out.data_mut().chunks_mut(d).zip(&wv) {
            row.iter_mut().for_each(|o| *o *= a);
        }
        Ok(self.push(out, &[x, w], Op::ScaleRows(x, w)))
    }

    /// Zeroes unmasked entries and divides each row by its masked sum.
    pub fn masked_normalize(&mut self, s: Var, mask: &[bool]) -> Result<Var> {
        let (_, m) = self.value(s).as_matrix();
        if mask.len() != self.value(s).numel() {
            return Err(Error::shape(
                "masked_normalize",
                self.shape(s),
                &[mask.len()],
            ));
        }
        let mut out = self.value(s).clone();
        for (row, mrow) in out.data_mut().chunks_mut(m).zip(mask.chunks(m)) {
            let total: f64 = row.iter().zip(mrow).filter(|(_, &k)| k).map(|(v, _)| v).sum();
            if !mrow.iter().any(|&k| k) {
                return Err(Error::Routing("empty expert selection".into()));
            }
            for (o, &k) in row.iter_mut().zip(mrow) {
                *o = if k { *o / total } else { 0.0 };
            }
        }
        Ok(self.push(out, &[s], Op::MaskedNormalize(s, mask.into())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(out, &[x], Op::Mean(x))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Rotates query/key rows `x[B·T × heads·head_dim]` by their positions.
    pub fn rope(
        &mut self,
        x: Var,
        table: Arc<RotaryTable>,
        positions: Arc<[(usize, usize)]>,
        heads: usize,
    ) -> Result<Var> {
        let mut out = self.value(x).clone();
        rope::rotate_rows(out.data_mut(), &table, &positions, heads, false)?;
        Ok(self.push(
            out,
            &[x],
            Op::Rope {
                x,
                table,
                positions,
                heads,
            },
        ))
    }

    /// Fused scaled-dot-product attention over `dims.batch` independent
    /// sequences. `q` is `[B·T × H·hd]`; `k`, `v` are `[B·T × H_kv·hd]`.
    /// Query heads are grouped contiguously onto key/value heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims) -> Result<Var> {
        let n = dims.batch * dims.tokens;
        let qw = dims.heads * dims.head_dim;
        let kw = dims.kv_heads * dims.head_dim;
        if dims.kv_heads == 0 || !dims.heads.is_multiple_of(dims.kv_heads) {
            return Err(Error::Config(format!(
                "{} heads cannot be grouped onto {} kv heads",
                dims.heads, dims.kv_heads
            )));
        }
        if self.shape(q) != [n, qw] {
            return Err(Error::shape("attention(q)", self.shape(q), &[n, qw]));
        }
        for x in [k, v] {
            if self.shape(x) != [n, kw] {
                return Err(Error::shape("attention(k/v)", self.shape(x), &[n, kw]));
            }
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
        );
        let out = Tensor::new([n, qw], out)?;
        Ok(self.push(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(id, &g, &mut grads)?;
        }
        for (id, g) in grads.into_iter().enumerate() {
            let (Some(g), Some(acc)) = (g, self.nodes[id].grad.as_mut()) else {
                continue;
            };
            acc.data_mut().iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).shape()[1];
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(ga) = slot(grads, nodes, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, 1.0, MatRef::row_major(g, n), MatRef::transposed(&bv, n), 1.0, ga);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, 1.0, MatRef::transposed(&av, k), MatRef::row_major(g, n), 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).as_matrix();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if let Some(gx) = slot(grads, nodes, x) {
                        add_into(gx, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * f);
                }
            }
            Op::AddBias(x, b) => {
                let d = self.value(*b).numel();
                if let Some(gx) = slot(grads, nodes, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddExpand(x, s) => {
                let (bsz, d) = self.value(*s).as_matrix();
                let t = g.len() / d / bsz;
                if let Some(gx) = slot(grads, nodes, *x) {
                    add_into(gx, g);
                }
                if let Some(gs) = slot(grads, nodes, *s) {
                    for (r, row) in g.chunks(d).enumerate() {
                        add_into(&mut gs[(r / t) * d..(r / t + 1) * d], row);
                    }
                }
            }
            Op::MulExpand(x, s) => {
                let (bsz, d) = self.value(*s).as_matrix();
                let t = g.len() / d / bsz;
                let (xv, sv) = (val(*x).to_vec(), val(*s).to_vec());
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, (gr, go)) in g.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        let srow = &sv[(r / t) * d..(r / t + 1) * d];
                        for j in 0..d {
                            go[j] += gr[j] * srow[j];
                        }
                    }
                }
                if let Some(gs) = slot(grads, nodes, *s) {
                    for (r, (gr, xr)) in g.chunks(d).zip(xv.chunks(d)).enumerate() {
                        let gsr = &mut gs[(r / t) * d..(r / t + 1) * d];
                        for j in 0..d {
                            gsr[j] += gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x).to_vec();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = node.value.as_matrix();
                let y = node.value.data();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            or[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let d = self.value(*weight).numel();
                let (xv, wv) = (val(*x).to_vec(), val(*weight).to_vec());
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                        let inv = inv_rms[r];
                        // y_j = x_j·r·w_j with r = (mean(x²)+eps)^(-1/2)
                        let dot: f64 = (0..d).map(|j| gr[j] * wv[j] * xr[j]).sum();
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += inv * gr[j] * wv[j] - inv.powi(3) * xr[j] * dot / d as f64;
                        }
                    }
                }
                if let Some(gw) = slot(grads, nodes, *weight) {
                    for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            gw[j] += gr[j] * xr[j] * inv_rms[r];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let (_, d) = node.value.as_matrix();
                let sv = scale.map(|s| val(s).to_vec());
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, (gr, nr)) in g.chunks(d).zip(normalized.chunks(d)).enumerate() {
                        let gn: Vec<f64> = match &sv {
                            Some(s) => gr.iter().zip(s).map(|(a, b)| a * b).collect(),
                            None => gr.to_vec(),
                        };
                        let mean_g = gn.iter().sum::<f64>() / d as f64;
                        let mean_gn = gn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            gxr[j] += inv_std[r] * (gn[j] - mean_g - nr[j] * mean_gn);
                        }
                    }
                }
                if let Some(s) = scale {
                    if let Some(gs) = slot(grads, nodes, *s) {
                        for (gr, nr) in g.chunks(d).zip(normalized.chunks(d)) {
                            for j in 0..d {
                                gs[j] += gr[j] * nr[j];
                            }
                        }
                    }
                }
                if let Some(s) = shift {
                    if let Some(gs) = slot(grads, nodes, *s) {
                        for gr in g.chunks(d) {
                            add_into(gs, gr);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    add_into(gx, g);
                }
            }
            Op::IndexSelect(x, rows) => {
                let (_, d) = node.value.as_matrix();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::ScatterAdd(src, rows) => {
                let (_, d) = node.value.as_matrix();
                if let Some(gs) = slot(grads, nodes, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gs[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Gather(x, source) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (i, &s) in source.iter().enumerate() {
                        gx[s] += g[i];
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let (_, d) = self.value(*x).as_matrix();
                let (_, len) = node.value.as_matrix();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * d + start..r * d + start + len], gr);
                    }
                }
            }
            Op::GatherEntries(x, entries) => {
                let (_, d) = self.value(*x).as_matrix();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (i, &(r, c)) in entries.iter().enumerate() {
                        gx[r * d + c] += g[i];
                    }
                }
            }
            Op::ScaleRows(x, w) => {
                let (_, d) = node.value.as_matrix();
                let (xv, wv) = (val(*x).to_vec(), val(*w).to_vec());
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, (gr, or)) in g.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                        or.iter_mut().zip(gr).for_each(|(o, v)| *o += v * wv[r]);
                    }
                }
                if let Some(gw) = slot(grads, nodes, *w) {
                    for (r, (gr, xr)) in g.chunks(d).zip(xv.chunks(d)).enumerate() {
                        gw[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::MaskedNormalize(s, mask) => {
                let (_, m) = node.value.as_matrix();
                let sv = val(*s).to_vec();
                let y = node.value.data();
                if let Some(gs) = slot(grads, nodes, *s) {
                    for r in 0..g.len() / m {
                        let span = r * m..(r + 1) * m;
                        let (mr, yr, gr) = (&mask[span.clone()], &y[span.clone()], &g[span.clone()]);
                        let total: f64 = sv[span.clone()]
                            .iter()
                            .zip(mr)
                            .filter(|(_, &k)| k)
                            .map(|(v, _)| v)
                            .sum();
                        // y_i = s_i / Σ s_j over the mask
                        let dot: f64 = (0..m).filter(|&j| mr[j]).map(|j| gr[j] * yr[j]).sum();
                        let gsr = &mut gs[span];
                        for j in 0..m {
                            if mr[j] {
                                gsr[j] += (gr[j] - dot) / total;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Rope {
                x,
                table,
                positions,
                heads,
            } => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    let mut back = g.to_vec();
                    rope::rotate_rows(&mut back, table, positions, *heads, true)?;
                    add_into(gx, &back);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q).to_vec(), val(*k).to_vec(), val(*v).to_vec());
                let (gq, gk, gv) = attention_backward(&qv, &kv, &vv, probs, g, *dims);
                for (var, grad) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if wants(var) {
                        if let Some(b) = slot(grads, nodes, var) {
                            add_into(b, &grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], d: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let (t, hd) = (d.tokens, d.head_dim);
    let qw = d.heads * hd;
    let kw = d.kv_heads * hd;
    let group = d.heads / d.kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; d.batch * t * qw];
    let mut probs = vec![0.0; d.batch * d.heads * t * t];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let kh = h / group;
            let p = &mut probs[(b * d.heads + h) * t * t..(b * d.heads + h + 1) * t * t];
            for i in 0..t {
                let qi = &q[(b * t + i) * qw + h * hd..][..hd];
                let row = &mut p[i * t..(i + 1) * t];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[(b * t + j) * kw + kh * hd..][..hd];
                    *r = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[(b * t + i) * qw + h * hd..][..hd];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &v[(b * t + j) * kw + kh * hd..][..hd];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    d: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, hd) = (d.tokens, d.head_dim);
    let qw = d.heads * hd;
    let kw = d.kv_heads * hd;
    let group = d.heads / d.kv_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; t];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let kh = h / group;
            let p = &probs[(b * d.heads + h) * t * t..(b * d.heads + h + 1) * t * t];
            for i in 0..t {
                let gi = &g[(b * t + i) * qw + h * hd..][..hd];
                let prow = &p[i * t..(i + 1) * t];
                for j in 0..t {
                    let vj = &v[(b * t + j) * kw + kh * hd..][..hd];
                    dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    let gvj = &mut gv[(b * t + j) * kw + kh * hd..][..hd];
                    gvj.iter_mut().zip(gi).for_each(|(o, x)| *o += prow[j] * x);
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                let qi = &q[(b * t + i) * qw + h * hd..][..hd];
                for j in 0..t {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k[(b * t + j) * kw + kh * hd..][..hd];
                    let gqi = &mut gq[(b * t + i) * qw + h * hd..][..hd];
                    gqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                    let gkj = &mut gk[(b * t + j) * kw + kh * hd..][..hd];
                    gkj.iter_mut().zip(qi).for_each(|(o, x)| *o += ds * x);
                }
            }
        }
    }
    (gq, gk, gv)
}
