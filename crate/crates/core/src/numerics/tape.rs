//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`ComputeGraph`]; node ids are
//! assigned in creation order, so the tape is its own topological order.
//! [`ComputeGraph::backward`] walks it in reverse and accumulates gradients
//! additively, which handles tensors consumed by several operations.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::NumericsError;

/// Score used for masked attention entries; avoids `-inf` arithmetic.
pub const MASK_FILL: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`ComputeGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// In-neighbor lists for [`ComputeGraph::neighbor_mean`]; constant per pass.
pub type Adjacency = Vec<Vec<usize>>;

/// Batch layout of a fused causal attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags; `false` keys are filled with [`MASK_FILL`].
    pub key_valid: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Tanh,
    Softmax,
    LayerNorm,
    GatherRows,
    Concat,
    MeanAxis,
    SumAll,
    Slice,
    MaskedFill,
    Reshape,
    NeighborMean,
    Attention,
    Dropout,
}

enum Op {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    Slice { x: Var, axis: usize, start: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    Reshape(Var),
    NeighborMean { x: Var, adjacency: Rc<Adjacency> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_valid: Option<Vec<bool>>,
        probs: Vec<f64>,
    },
    Dropout { x: Var, scale: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Concat { .. } => OpKind::Concat,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Slice { .. } => OpKind::Slice,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::Reshape(_) => OpKind::Reshape,
            Op::NeighborMean { .. } => OpKind::NeighborMean,
            Op::Attention { .. } => OpKind::Attention,
            Op::Dropout { .. } => OpKind::Dropout,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::SumAll(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::NeighborMean { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation. Single-threaded; build one per pass.
#[derive(Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar loss with respect to leaf and parameter nodes.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument { op, msg: msg.into() }
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// All nodes in tape (topological) order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Ids consumed by node `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Leaf | Op::Param => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Differentiable leaf (used for gradient checks on inputs).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let mut t = store.get(id).clone();
        t.zero_grad();
        let v = self.push(t, Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = if k == 0 { sa[..sa.len() - 1].iter().product() } else { self.value(a).numel() / k };
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b)))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || sa.ends_with(sb) {
            Ok(sa.to_vec())
        } else if sb.ends_with(sa) {
            Ok(sb.to_vec())
        } else {
            Err(mismatch(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, NumericsError> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let numel: usize = shape.iter().product();
        let (na, nb) = (da.len().max(1), db.len().max(1));
        let out: Vec<f64> = (0..numel).map(|i| f(da[i % na], db[i % nb])).collect();
        Ok(self.push(Tensor::new(shape, out)?, make(a, b)))
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
        self.push(out, Op::Scale(x, c))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(invalid("softmax", "needs at least one axis"));
        }
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let d = t.last_dim();
        let (sg, sb) = (self.value(gamma).shape(), self.value(beta).shape());
        if sg != [d] || sb != [d] {
            return Err(mismatch("layer_norm", t.shape(), if sg != [d] { sg } else { sb }));
        }
        let rows = t.leading();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, h)| g[i % d] * h + b[i % d]).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Selects rows (slices along axis 0) by index; repeated indices allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(invalid("gather_rows", "scalar input"));
        }
        let rows = t.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid("gather_rows", format!("index {bad} out of range for {rows} rows")));
        }
        let width: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Embedding lookup: rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        if self.value(table).rank() != 2 {
            return Err(invalid("embedding", format!("table must be 2-D, got {:?}", self.value(table).shape())));
        }
        self.gather_rows(table, ids)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {:?}", base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if axis >= t.rank() || t.shape()[axis] == 0 {
            return Err(invalid("mean_axis", format!("axis {axis} invalid for {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if axis >= t.rank() || start > end || end > t.shape()[axis] {
            return Err(invalid("slice", format!("[{start}, {end}) on axis {axis} of {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }))
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(mismatch("masked_fill", t.shape(), &[mask.len()]));
        }
        let out: Vec<f64> = t.data().iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedFill { x, mask: mask.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `out[v] = mean_{u in adjacency[v]} x[u]`; empty neighborhoods give zeros.
    pub fn neighbor_mean(&mut self, x: Var, adjacency: Rc<Adjacency>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != adjacency.len() {
            return Err(mismatch("neighbor_mean", t.shape(), &[adjacency.len()]));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; n * d];
        for (v, nbrs) in adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let w = 1.0 / nbrs.len() as f64;
            let dst = &mut out[v * d..(v + 1) * d];
            for &u in nbrs {
                if u >= n {
                    return Err(invalid("neighbor_mean", format!("neighbor {u} out of range for {n} nodes")));
                }
                for (o, s) in dst.iter_mut().zip(&t.data()[u * d..(u + 1) * d]) {
                    *o += w * s;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::NeighborMean { x, adjacency }))
    }

    /// Multi-head causal self-attention on already-projected q, k, v.
    ///
    /// Accepts `[batch * seq, heads * head_dim]` rows or, for a single
    /// sequence, `[seq, heads, head_dim]`. Position `i` attends to keys
    /// `j <= i`; scores are scaled by `1/sqrt(head_dim)` and invalid keys
    /// are filled with [`MASK_FILL`]. Future keys get exactly zero weight.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var, NumericsError> {
        let sq = self.value(q).shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != sq.as_slice() {
                return Err(mismatch("causal_attention", &sq, self.value(other).shape()));
            }
        }
        let AttentionLayout { batch, seq, heads, .. } = *layout;
        if seq == 0 || batch == 0 {
            return Err(invalid("causal_attention", "sequence length 0"));
        }
        let numel = self.value(q).numel();
        if heads == 0 || !numel.is_multiple_of(batch * seq * heads) {
            return Err(invalid("causal_attention", format!("shape {:?} incompatible with layout {batch}x{seq}x{heads}", sq)));
        }
        if sq.len() == 3 && (sq[0] != seq || sq[1] != heads || batch != 1) {
            return Err(invalid("causal_attention", format!("3-D input {:?} must be [seq, heads, head_dim]", sq)));
        }
        if let Some(mask) = &layout.key_valid {
            if mask.len() != batch * seq {
                return Err(mismatch("causal_attention", &[batch, seq], &[mask.len()]));
            }
        }
        let d = numel / (batch * seq);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; numel];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut row = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..(b * seq + i) * d + off + hd];
                    for j in 0..=i {
                        let valid = layout.key_valid.as_ref().is_none_or(|m| m[b * seq + j]);
                        row[j] = if valid {
                            let kj = &kd[(b * seq + j) * d + off..(b * seq + j) * d + off + hd];
                            dot(qi, kj) * scale
                        } else {
                            MASK_FILL
                        };
                    }
                    softmax_in_place(&mut row[..=i]);
                    let prow = &mut probs[pbase + i * seq..pbase + i * seq + seq];
                    prow[..=i].copy_from_slice(&row[..=i]);
                    let oi = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + hd];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &vd[(b * seq + j) * d + off..(b * seq + j) * d + off + hd];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(sq, out)?;
        let key_valid = layout.key_valid.clone();
        Ok(self.push(out, Op::Attention { q, k, v, batch, seq, heads, key_valid, probs }))
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..t.numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let out: Vec<f64> = t.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { x, scale }))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index into `src` for output element `i` under leading-axis broadcasting.
#[inline]
fn bidx(i: usize, n: usize) -> usize {
    i % n
}

impl ComputeGraph {
    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let g = match if keep { grads[id].clone() } else { grads[id].take() } {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = out.numel() / n.max(1);
                if self.wants(*a) {
                    add_into(&mut grads[a.0], ta.numel(), |da| matmul_bt_acc(g, tb.data(), da, m, n, k));
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], tb.numel(), |db| matmul_at_acc(ta.data(), g, db, m, k, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let len = self.value(v).numel();
                    add_into(&mut grads[v.0], len, |d| {
                        let n = len.max(1);
                        for (i, gi) in g.iter().enumerate() {
                            d[bidx(i, n)] += s * gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.numel().max(1), tb.numel().max(1));
                if self.wants(*a) {
                    add_into(&mut grads[a.0], ta.numel(), |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[bidx(i, na)] += gi * tb.data()[bidx(i, nb)];
                        }
                    });
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], tb.numel(), |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[bidx(i, nb)] += gi * ta.data()[bidx(i, na)];
                        }
                    });
                }
            }
            Op::Scale(x, c) => add_into(&mut grads[x.0], g.len(), |d| {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += c * gi;
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                add_into(&mut grads[x.0], g.len(), |d| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                add_into(&mut grads[x.0], g.len(), |d| {
                    for i in 0..g.len() {
                        let v = xv[i];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                })
            }
            Op::Tanh(x) => add_into(&mut grads[x.0], g.len(), |d| {
                for i in 0..g.len() {
                    let y = out.data()[i];
                    d[i] += g[i] * (1.0 - y * y);
                }
            }),
            Op::Softmax(x) => {
                let dim = out.last_dim();
                add_into(&mut grads[x.0], g.len(), |d| {
                    for ((dr, yr), gr) in d.chunks_mut(dim).zip(out.data().chunks(dim)).zip(g.chunks(dim)) {
                        let s = dot(yr, gr);
                        for i in 0..dim {
                            dr[i] += yr[i] * (gr[i] - s);
                        }
                    }
                })
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dim = out.last_dim();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], dim, |d| {
                        for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for i in 0..dim {
                                d[i] += gr[i] * hr[i];
                            }
                        }
                    });
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], dim, |d| {
                        for gr in g.chunks(dim) {
                            for i in 0..dim {
                                d[i] += gr[i];
                            }
                        }
                    });
                }
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.len(), |d| {
                        let mut dxhat = vec![0.0; dim];
                        for (r, ((dr, gr), hr)) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(xhat.chunks(dim)).enumerate() {
                            for i in 0..dim {
                                dxhat[i] = gr[i] * gam[i];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                            let m2 = dot(&dxhat, hr) / dim as f64;
                            for i in 0..dim {
                                dr[i] += rstd[r] * (dxhat[i] - m1 - hr[i] * m2);
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let width: usize = tx.shape()[1..].iter().product();
                add_into(&mut grads[x.0], tx.numel(), |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (di, gi) in d[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *di += gi;
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let t = self.value(*v);
                    let len = t.shape()[*axis];
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], t.numel(), |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                for (di, gi) in d[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                    *di += gi;
                                }
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::MeanAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, len, inner) = split_axis(tx.shape(), *axis);
                let w = 1.0 / len as f64;
                add_into(&mut grads[x.0], tx.numel(), |d| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut d[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (di, gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *di += w * gi;
                            }
                        }
                    }
                })
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                add_into(&mut grads[x.0], n, |d| d.iter_mut().for_each(|v| *v += g[0]))
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, len, inner) = split_axis(tx.shape(), *axis);
                let width = out.shape()[*axis];
                add_into(&mut grads[x.0], tx.numel(), |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + start + width) * inner];
                        for (di, gi) in dst.iter_mut().zip(&g[o * width * inner..(o + 1) * width * inner]) {
                            *di += gi;
                        }
                    }
                })
            }
            Op::MaskedFill { x, mask } => add_into(&mut grads[x.0], g.len(), |d| {
                for i in 0..g.len() {
                    if !mask[i] {
                        d[i] += g[i];
                    }
                }
            }),
            Op::Reshape(x) => add_into(&mut grads[x.0], g.len(), |d| {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += gi;
                }
            }),
            Op::NeighborMean { x, adjacency } => {
                let dim = out.shape()[1];
                add_into(&mut grads[x.0], g.len(), |d| {
                    for (v, nbrs) in adjacency.iter().enumerate() {
                        if nbrs.is_empty() {
                            continue;
                        }
                        let w = 1.0 / nbrs.len() as f64;
                        let gv = &g[v * dim..(v + 1) * dim];
                        for &u in nbrs {
                            for (di, gi) in d[u * dim..(u + 1) * dim].iter_mut().zip(gv) {
                                *di += w * gi;
                            }
                        }
                    }
                })
            }
            Op::Attention { q, k, v, batch, seq, heads, key_valid, probs } => {
                self.attention_backward(g, grads, (*q, *k, *v), (*batch, *seq, *heads), key_valid.as_deref(), probs);
            }
            Op::Dropout { x, scale } => add_into(&mut grads[x.0], g.len(), |d| {
                for i in 0..g.len() {
                    d[i] += g[i] * scale[i];
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        key_valid: Option<&[bool]>,
        probs: &[f64],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let numel = qd.len();
        let d = numel / (batch * seq);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; numel];
        let mut dk = vec![0.0; numel];
        let mut dv = vec![0.0; numel];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * hd;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let row = |j: usize| (b * seq + j) * d + off;
                    let gi = &g[row(i)..row(i) + hd];
                    let prow = &probs[pbase + i * seq..pbase + i * seq + seq];
                    for j in 0..=i {
                        dp[j] = dot(gi, &vd[row(j)..row(j) + hd]);
                        let p = prow[j];
                        for (dvx, gx) in dv[row(j)..row(j) + hd].iter_mut().zip(gi) {
                            *dvx += p * gx;
                        }
                    }
                    let s = dot(&prow[..=i], &dp[..=i]);
                    for j in 0..=i {
                        if key_valid.is_some_and(|m| !m[b * seq + j]) {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..hd {
                            dq[row(i) + t] += ds * kd[row(j) + t];
                            dk[row(j) + t] += ds * qd[row(i) + t];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                add_into(&mut grads[var.0], numel, |dst| {
                    for (a, b) in dst.iter_mut().zip(&buf) {
                        *a += b;
                    }
                });
            }
        }
    }

    /// Adds parameter gradients from `grads` into the matching store entries.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&pid, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }

    /// Parameter ids bound in this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(p, v)| (*p, *v))
    }
}
