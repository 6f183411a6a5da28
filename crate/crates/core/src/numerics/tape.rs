//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every op appends one node whose inputs are earlier nodes, so the node
//! list is already in topological order and `backward` is a single reverse
//! sweep.

use std::fmt;

use super::kernels::{self, gelu, gelu_grad};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{canonical_sum, Scalar};

/// Additive logit offset for disallowed attention keys.
pub const MASK_OFFSET: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation family, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    Gelu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SelectRows,
    Gather,
    ConcatRows,
    Attention,
    L2Normalize,
    SegmentMean,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRow,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SelectRows,
        OpKind::Gather,
        OpKind::ConcatRows,
        OpKind::Attention,
        OpKind::L2Normalize,
        OpKind::SegmentMean,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SelectRows => "select_rows",
            OpKind::Gather => "gather",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Attention => "attention",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::SegmentMean => "segment_mean",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One attention block: a contiguous run of query rows attending over a
/// contiguous run of key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnSegment {
    /// Self-attention over rows `start..start+len`.
    pub fn square(start: usize, len: usize) -> Self {
        AttnSegment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

/// Row partition and masking for a fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub segments: Vec<AttnSegment>,
    /// `true` marks a key row that no query may attend to.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnLayout {
    /// Packs consecutive self-attention sequences of the given lengths.
    pub fn packed(heads: usize, lengths: &[usize]) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = AttnSegment::square(start, len);
                start += len;
                s
            })
            .collect();
        AttnLayout {
            heads,
            segments,
            key_mask: None,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        /// Per (segment, head) row-major probability blocks.
        probs: Vec<T>,
    },
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    SegmentMean(Var, Vec<(usize, usize)>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SelectRows(..) => OpKind::SelectRows,
            Op::Gather(..) => OpKind::Gather,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Attention { .. } => OpKind::Attention,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::SegmentMean(..) => OpKind::SegmentMean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Leaf whose gradient is reported by `backward`.
    tracked: bool,
    /// Some tracked leaf is reachable through this node's inputs.
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to tracked leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a tracked leaf; `None` for constants and intermediates.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The operation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the gradient rule of one op family. Test fixture for the
    /// gradient checker; never enable in training.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    /// Inputs recorded for `var`, in argument order.
    pub fn inputs(&self, var: Var) -> Vec<Var> {
        match &self.nodes[var.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SelectRows(a, _)
            | Op::Gather(a, _)
            | Op::SegmentMean(a, _) => vec![*a],
            Op::Softmax { x, .. } | Op::L2Normalize { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(vs) => vs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = {
            let nodes = &self.nodes;
            let any = |v: &Var| nodes[v.0].needs_grad;
            match &op {
                Op::Leaf => false,
                Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                    any(a) || any(b)
                }
                Op::Transpose(a)
                | Op::Scale(a, _)
                | Op::Gelu(a)
                | Op::LogSoftmax(a)
                | Op::Sum(a)
                | Op::Mean(a)
                | Op::SelectRows(a, _)
                | Op::Gather(a, _)
                | Op::SegmentMean(a, _) => any(a),
                Op::Softmax { x, .. } | Op::L2Normalize { x, .. } => any(x),
                Op::LayerNorm { x, gain, bias, .. } => any(x) || any(gain) || any(bias),
                Op::ConcatRows(vs) => vs.iter().any(any),
                Op::Attention { q, k, v, .. } => any(q) || any(k) || any(v),
                Op::CrossEntropy { logits, .. } => any(logits),
            }
        };
        self.nodes.push(Node {
            value,
            op,
            tracked: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(var);
        match s {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Adds a row vector to every row (trailing-axis broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols || self.shape(a).len() != 2 {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(a, row)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` along the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be > 0".into()));
        }
        let vx = self.value(x);
        let cols = *vx.shape().last().expect("non-empty shape");
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::dim("layer_norm", vx.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.len() / cols;
        let n = T::lit(cols as f64);
        let mut out = vec![T::zero(); vx.len()];
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.shape().len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {:?}", vx.shape())));
        }
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input"));
        }
        let (outer, n, inner) = Self::axis_geometry(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..n {
                    out[idx(j)] /= denom;
                }
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax input"));
        }
        let cols = *vx.shape().last().expect("non-empty shape");
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(cols) {
            log_softmax_in_place(row);
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::lit(va.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Picks rows of a matrix (rows may repeat).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("select_rows index {bad} >= {r}")));
        }
        if rows.is_empty() {
            return Err(Error::Contract("select_rows with no rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&va.data()[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::SelectRows(a, rows.to_vec()),
        ))
    }

    /// Flat element gather: `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        if index.iter().any(|&i| i >= va.len()) {
            return Err(Error::Contract("gather index out of range".into()));
        }
        let out = index.iter().map(|&i| va.data()[i]).collect();
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather(a, index)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != c {
                return Err(Error::dim("concat_rows", self.shape(first), vp.shape()));
            }
            rows += vp.rows();
            out.extend_from_slice(vp.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// Keys inside a segment are reduced in a canonical order determined by
    /// their contents, so permuting key rows leaves every output row
    /// bit-identical.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (tq, d) = self.matrix_dims(q, "attention")?;
        let (tk, dk) = self.matrix_dims(k, "attention")?;
        if self.shape(k) != self.shape(v) || d != dk {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {} heads",
                layout.heads
            )));
        }
        if let Some(mask) = &layout.key_mask {
            if mask.len() != tk {
                return Err(Error::dim("attention mask", &[mask.len()], &[tk]));
            }
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > tq || s.k_start + s.k_len > tk || s.k_len == 0 {
                return Err(Error::Contract(format!("attention segment {s:?} out of range")));
            }
        }
        let heads = layout.heads;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mask_offset = T::lit(MASK_OFFSET);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); tq * d];
        let total: usize = layout.segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut order: Vec<usize> = Vec::new();
        let mut scores: Vec<T> = Vec::new();
        for seg in &layout.segments {
            for h in 0..heads {
                let col = h * dh;
                let krow = |j: usize| &kd[(seg.k_start + j) * d + col..(seg.k_start + j) * d + col + dh];
                let vrow = |j: usize| &vd[(seg.k_start + j) * d + col..(seg.k_start + j) * d + col + dh];
                order.clear();
                order.extend(0..seg.k_len);
                order.sort_by(|&a, &b| {
                    let ka = krow(a).iter().chain(vrow(a)).map(|x| x.bits());
                    let kb = krow(b).iter().chain(vrow(b)).map(|x| x.bits());
                    ka.cmp(kb)
                });
                for i in 0..seg.q_len {
                    let qi = seg.q_start + i;
                    let qrow = &qd[qi * d + col..qi * d + col + dh];
                    scores.clear();
                    for j in 0..seg.k_len {
                        let mut s = kernels::dot(qrow, krow(j)) * scale;
                        if let Some(mask) = &layout.key_mask {
                            if mask[seg.k_start + j] {
                                s += mask_offset;
                            }
                        }
                        scores.push(s);
                    }
                    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                    }
                    let denom = order.iter().fold(T::zero(), |acc, &j| acc + scores[j]);
                    for s in scores.iter_mut() {
                        *s /= denom;
                    }
                    let orow = &mut out[qi * d + col..qi * d + col + dh];
                    for &j in &order {
                        let p = scores[j];
                        for (o, &x) in orow.iter_mut().zip(vrow(j)) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![tq, d], out),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Divides each row by its Euclidean norm plus `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.data().to_vec();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in out.chunks_mut(c) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            norms.push(n);
            let s = n + eps;
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, eps, norms })
    }

    /// Mean of each `(start, len)` run of rows.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        if segments.is_empty() || segments.iter().any(|&(s, l)| l == 0 || s + l > r) {
            return Err(Error::Contract("segment_mean segments out of range".into()));
        }
        let mut out = vec![T::zero(); segments.len() * c];
        for (si, &(s, l)) in segments.iter().enumerate() {
            let inv = T::one() / T::lit(l as f64);
            let orow = &mut out[si * c..(si + 1) * c];
            for rr in s..s + l {
                for (o, &v) in orow.iter_mut().zip(vx.row(rr)) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![segments.len(), c], out),
            Op::SegmentMean(x, segments.to_vec()),
        ))
    }

    /// Mean negative log-likelihood of `targets[i]` under row `i`'s softmax.
    ///
    /// Row losses are reduced in canonical order, so permuting rows together
    /// with their targets leaves the value bit-identical.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let c = vl.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!("target {bad} >= {c} classes")));
        }
        if vl.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("cross_entropy logits"));
        }
        let mut probs = vl.data().to_vec();
        let mut losses = Vec::with_capacity(targets.len());
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            log_softmax_in_place(row);
            losses.push(-row[t]);
            for v in row.iter_mut() {
                *v = v.exp();
            }
        }
        let loss = canonical_sum(&mut losses) / T::lit(targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.local_grads(idx, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, t) in contributions.iter_mut() {
                    for x in t.data_mut() {
                        *x = *x * T::lit(1.5) + T::lit(1e-3);
                    }
                }
            }
            for (var, delta) in contributions {
                accumulate(&mut grads[var.0], delta);
            }
            // Intermediate gradients are not exposed.
            grads[idx] = None;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.tracked {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Vector-Jacobian products of node `idx` for each input needing a gradient.
    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(self.value(*a).data(), gd, &mut db, m, k, n);
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::Transpose(a) => {
                let s = g.shape();
                out.push((*a, Tensor::from_parts(vec![s[1], s[0]], kernels::transpose(gd, s[0], s[1]))));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    out.push((*a, Tensor::from_parts(g.shape().to_vec(), d)));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    out.push((*b, Tensor::from_parts(g.shape().to_vec(), d)));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.map(|x| x * *f))),
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*r) {
                    let c = g.cols();
                    let mut dr = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &x) in dr.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    out.push((*r, Tensor::from_parts(self.shape(*r).to_vec(), dr)));
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let d = gd.iter().zip(va).map(|(&x, &v)| x * gelu_grad(v)).collect();
                out.push((*a, Tensor::from_parts(g.shape().to_vec(), d)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let n = T::lit(c as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh /= n;
                        mean_dhh /= n;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dx[r * c + j] = rs * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
                }
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (row, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += row[j] * hrow[j];
                        }
                    }
                    out.push((*gain, Tensor::from_parts(self.shape(*gain).to_vec(), dg)));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for j in 0..c {
                            db[j] += row[j];
                        }
                    }
                    out.push((*bias, Tensor::from_parts(self.shape(*bias).to_vec(), db)));
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = Self::axis_geometry(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot = (0..n).fold(T::zero(), |acc, j| acc + gd[at(j)] * y[at(j)]);
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = *g.shape().last().expect("shape");
                let mut dx = vec![T::zero(); y.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                    let s = grow.iter().fold(T::zero(), |a, &v| a + v);
                    for j in 0..c {
                        drow[j] = grow[j] - yrow[j].exp() * s;
                    }
                }
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
            }
            Op::Sum(a) => out.push((*a, Tensor::filled(self.shape(*a), gd[0]))),
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).len() as f64);
                out.push((*a, Tensor::filled(self.shape(*a), gd[0] / n)));
            }
            Op::SelectRows(a, rows) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut da = vec![T::zero(); va.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for (d, &x) in da[src * c..(src + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *d += x;
                    }
                }
                out.push((*a, Tensor::from_parts(va.shape().to_vec(), da)));
            }
            Op::Gather(a, index) => {
                let va = self.value(*a);
                let mut da = vec![T::zero(); va.len()];
                for (&src, &x) in index.iter().zip(gd) {
                    da[src] += x;
                }
                out.push((*a, Tensor::from_parts(va.shape().to_vec(), da)));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        out.push((
                            p,
                            Tensor::from_parts(self.shape(p).to_vec(), gd[offset..offset + len].to_vec()),
                        ));
                    }
                    offset += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, gd);
                if self.wants(*q) {
                    out.push((*q, dq));
                }
                if self.wants(*k) {
                    out.push((*k, dk));
                }
                if self.wants(*v) {
                    out.push((*v, dv));
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut dx = vec![T::zero(); vx.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let xr = vx.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let s = n + *eps;
                    let proj = if n > T::zero() {
                        kernels::dot(xr, gr) / (s * s * n)
                    } else {
                        T::zero()
                    };
                    for j in 0..c {
                        dx[r * c + j] = gr[j] / s - xr[j] * proj;
                    }
                }
                out.push((*x, Tensor::from_parts(vx.shape().to_vec(), dx)));
            }
            Op::SegmentMean(x, segments) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut dx = vec![T::zero(); vx.len()];
                for (si, &(s, l)) in segments.iter().enumerate() {
                    let inv = T::one() / T::lit(l as f64);
                    let grow = &gd[si * c..(si + 1) * c];
                    for r in s..s + l {
                        for (d, &x) in dx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                            *d += x * inv;
                        }
                    }
                }
                out.push((*x, Tensor::from_parts(vx.shape().to_vec(), dx)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = gd[0] / T::lit(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= scale;
                }
                out.push((*logits, Tensor::from_parts(self.shape(*logits).to_vec(), dl)));
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[T],
        gd: &[T],
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let qv = self.value(q);
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = self.value(k).rows();
        let qd = qv.data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let heads = layout.heads;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut dq = vec![T::zero(); tq * d];
        let mut dk = vec![T::zero(); tk * d];
        let mut dv = vec![T::zero(); tk * d];
        let mut offset = 0;
        let mut dp: Vec<T> = Vec::new();
        for seg in &layout.segments {
            for h in 0..heads {
                let col = h * dh;
                let block = &probs[offset..offset + seg.q_len * seg.k_len];
                offset += seg.q_len * seg.k_len;
                for i in 0..seg.q_len {
                    let qi = seg.q_start + i;
                    let go = &gd[qi * d + col..qi * d + col + dh];
                    let prow = &block[i * seg.k_len..(i + 1) * seg.k_len];
                    dp.clear();
                    for j in 0..seg.k_len {
                        let kj = seg.k_start + j;
                        dp.push(kernels::dot(go, &vd[kj * d + col..kj * d + col + dh]));
                        let p = prow[j];
                        for (dvv, &x) in dv[kj * d + col..kj * d + col + dh].iter_mut().zip(go) {
                            *dvv += p * x;
                        }
                    }
                    let inner = prow.iter().zip(&dp).fold(T::zero(), |a, (&p, &x)| a + p * x);
                    let qrow = &qd[qi * d + col..qi * d + col + dh];
                    for j in 0..seg.k_len {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = seg.k_start + j;
                        let krow = &kd[kj * d + col..kj * d + col + dh];
                        for (dqv, &x) in dq[qi * d + col..qi * d + col + dh].iter_mut().zip(krow) {
                            *dqv += ds * x;
                        }
                        for (dkv, &x) in dk[kj * d + col..kj * d + col + dh].iter_mut().zip(qrow) {
                            *dkv += ds * x;
                        }
                    }
                }
            }
        }
        (
            Tensor::from_parts(vec![tq, d], dq),
            Tensor::from_parts(vec![tk, d], dk),
            Tensor::from_parts(vec![tk, d], dv),
        )
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}
