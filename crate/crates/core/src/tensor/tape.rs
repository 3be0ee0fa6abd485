//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape; node ids are assigned in
//! creation order, so operands always precede their results and a single
//! reverse sweep is a valid topological traversal.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};

use super::dense::axis_split;
use super::kernels::{gemm, MatRef};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Variance offset inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Lower clamp applied to a target probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every forward result is rounded to the nearest 32-bit float.
    F32,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Operator set of the engine.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Batched matrix product; the rhs batch dims must be a suffix of the lhs ones.
    MatMul,
    /// Elementwise sum; the rhs shape must be a suffix of the lhs shape.
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Softmax { axis: usize },
    LayerNorm { axis: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Mean { axis: usize },
    Sum,
    /// `x: [N, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]` → `[N, C_out, L-K+1]`.
    Conv1d,
    Gather { indices: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Reshape { shape: Vec<usize> },
    /// Mean focal loss over `rows` of row-wise softmax(logits) against `targets`.
    FocalLoss { targets: Vec<usize>, rows: Vec<usize>, gamma: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LayerNorm { .. } => "layer-norm",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Mean { .. } => "mean",
            OpKind::Sum => "sum",
            OpKind::Conv1d => "conv1d",
            OpKind::Gather { .. } => "embedding-gather",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Reshape { .. } => "reshape",
            OpKind::FocalLoss { .. } => "focal-loss",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    /// Parses `name` or `name:arg` (axis for axis ops, factor for scale).
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let axis = || -> Result<usize> {
            arg.map(|a| a.parse::<usize>().map_err(|_| Error::UnknownOp(s.to_string())))
                .unwrap_or(Ok(0))
        };
        Ok(match name {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" | "elementwise-mul" => OpKind::Mul,
            "scale" => OpKind::Scale(
                arg.map(|a| a.parse::<f64>().map_err(|_| Error::UnknownOp(s.to_string())))
                    .unwrap_or(Ok(1.0))?,
            ),
            "relu" => OpKind::Relu,
            "softmax" => OpKind::Softmax { axis: axis()? },
            "layer-norm" => OpKind::LayerNorm { axis: axis()? },
            "concat" => OpKind::Concat { axis: axis()? },
            "mean" => OpKind::Mean { axis: axis()? },
            "sum" => OpKind::Sum,
            "conv1d" => OpKind::Conv1d,
            _ => return Err(Error::UnknownOp(s.to_string())),
        })
    }
}

#[derive(Debug)]
enum Record {
    Leaf,
    Param,
    Op { kind: OpKind, inputs: Vec<usize>, aux: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    record: Record,
}

/// Recorded computation graph.
///
/// A tape is confined to one thread. It may borrow a [`ParamStore`] read-only
/// so parameters enter the graph as leaves without being mutated.
#[derive(Debug)]
pub struct Tape<'p> {
    id: u32,
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    precision: Precision,
    clamp_events: usize,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    pub fn new() -> Self {
        Self::build(None)
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self::build(Some(params))
    }

    fn build(params: Option<&'p ParamStore>) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params,
            param_vars: HashMap::new(),
            precision: Precision::F64,
            clamp_events: 0,
        }
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times a target probability was clamped at [`PROB_FLOOR`].
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// (op name, operand ids, result id) for every recorded operation.
    pub fn records(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.record {
                Record::Op { kind, inputs, .. } => Some((kind.name(), inputs.clone(), i)),
                _ => None,
            })
            .collect()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, mut value: Tensor, record: Record) -> Var {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        self.nodes.push(Node { value, record });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Adds a constant or input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Record::Leaf)
    }

    /// Enters parameter `id` of the attached store; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("tape has no parameter store attached");
        let v = self.push(store.value(id).clone(), Record::Param);
        self.param_vars.insert(id, v);
        v
    }

    fn op(&mut self, kind: OpKind, inputs: &[Var], value: Tensor, aux: Vec<f64>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let inputs = inputs.iter().map(|v| v.index).collect();
        Ok(self.push(value, Record::Op { kind, inputs, aux }))
    }

    /// Applies `kind` to `operands` and records the result.
    pub fn apply(&mut self, kind: &OpKind, operands: &[Var]) -> Result<Var> {
        for &v in operands {
            self.check(v)?;
        }
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            OpKind::Conv1d => Some(3),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if operands.len() != n {
                return Err(Error::shape(
                    kind.name(),
                    format!("expected {n} operands, got {}", operands.len()),
                ));
            }
        } else if operands.is_empty() {
            return Err(Error::shape(kind.name(), "no operands"));
        }
        let (value, aux) = {
            let vals: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.index].value).collect();
            forward(kind, &vals, &mut self.clamp_events)?
        };
        self.op(kind.clone(), operands, value, aux)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(&OpKind::Scale(factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(&OpKind::Relu, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(&OpKind::Softmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(&OpKind::LayerNorm { axis }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(&OpKind::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(&OpKind::Slice { axis, start, len }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(&OpKind::Mean { axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(&OpKind::Sum, &[a])
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Conv1d, &[x, w, b])
    }

    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(&OpKind::Gather { indices }, &[table])
    }

    pub fn transpose(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        self.apply(&OpKind::Transpose { perm }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.transpose(a, perm)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(&OpKind::Reshape { shape }, &[a])
    }

    pub fn focal_loss(&mut self, logits: Var, targets: Vec<usize>, rows: Vec<usize>, gamma: f64) -> Result<Var> {
        self.apply(&OpKind::FocalLoss { targets, rows, gamma }, &[logits])
    }

    /// Reverse sweep from scalar `loss`; returns the gradient of every node
    /// that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads> {
        let root = self.check(loss)?;
        let lv = &self.nodes[root].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=root).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if let Record::Op { kind, inputs, aux } = &self.nodes[i].record {
                let vals: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let input_grads = backward(kind, &vals, &self.nodes[i].value, &dy, aux);
                for (&j, g) in inputs.iter().zip(input_grads) {
                    if let Some(g) = g {
                        match &mut grads[j] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            grads[i] = Some(dy);
        }
        Ok(NodeGrads { tape: self.id, grads })
    }

    /// Backpropagates `loss` and collects one gradient per parameter of the
    /// attached store; parameters that `loss` does not reach get zeros.
    pub fn backprop(&self, loss: Var) -> Result<Gradients> {
        let store = self.params.expect("tape has no parameter store attached");
        let node_grads = self.backward(loss)?;
        let mut grads: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        for (&pid, &var) in &self.param_vars {
            if let Some(g) = node_grads.get(var) {
                grads[pid.0] = g.clone();
            }
        }
        Ok(Gradients {
            grads,
            names: store.names().map(str::to_string).collect(),
        })
    }
}

/// Per-node gradients from [`Tape::backward`].
#[derive(Debug)]
pub struct NodeGrads {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

fn suffix_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(Error::shape(op, format!("{sa:?} with {sb:?}")));
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", t.shape())));
    }
    Ok(())
}

struct MatMulDims {
    outer: usize,
    inner: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatMulDims> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    if bb.len() > ba.len() || ba[ba.len() - bb.len()..] != *bb {
        return Err(Error::shape("matmul", format!("batch dims {sa:?} x {sb:?}")));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {sa:?} x {sb:?}")));
    }
    let inner: usize = bb.iter().product();
    let outer: usize = ba.iter().product::<usize>() / inner;
    Ok(MatMulDims { outer, inner, m, k, n })
}

fn forward(kind: &OpKind, x: &[&Tensor], clamp_events: &mut usize) -> Result<(Tensor, Vec<f64>)> {
    let none = Vec::new;
    Ok(match kind {
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let d = matmul_dims(a, b)?;
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            shape.push(d.n);
            let mut out = vec![0.0; shape.iter().product()];
            if d.inner == 1 {
                gemm(
                    MatRef::row_major(a.data(), d.outer * d.m, d.k),
                    MatRef::row_major(b.data(), d.k, d.n),
                    &mut out,
                    0.0,
                );
            } else {
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for o in 0..d.outer {
                    for i in 0..d.inner {
                        let ai = o * d.inner + i;
                        gemm(
                            MatRef::row_major(&a.data()[ai * sa..(ai + 1) * sa], d.m, d.k),
                            MatRef::row_major(&b.data()[i * sb..(i + 1) * sb], d.k, d.n),
                            &mut out[ai * sc..(ai + 1) * sc],
                            0.0,
                        );
                    }
                }
            }
            (Tensor::from_parts(shape, out), none())
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (x[0], x[1]);
            suffix_broadcast(kind.name(), a, b)?;
            let bd = b.data();
            let nb = bd.len();
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |p, q| p + q,
                OpKind::Sub => |p, q| p - q,
                _ => |p, q| p * q,
            };
            let out = a.data().iter().enumerate().map(|(i, &v)| f(v, bd[i % nb])).collect();
            (Tensor::from_parts(a.shape().to_vec(), out), none())
        }
        OpKind::Scale(c) => {
            let out = x[0].data().iter().map(|v| v * c).collect();
            (Tensor::from_parts(x[0].shape().to_vec(), out), none())
        }
        OpKind::Relu => {
            let out = x[0].data().iter().map(|&v| v.max(0.0)).collect();
            (Tensor::from_parts(x[0].shape().to_vec(), out), none())
        }
        OpKind::Softmax { axis } => {
            check_axis("softmax", x[0], *axis)?;
            (softmax_forward(x[0], *axis), none())
        }
        OpKind::LayerNorm { axis } => {
            check_axis("layer-norm", x[0], *axis)?;
            let (outer, n, inner) = axis_split(x[0].shape(), *axis);
            let src = x[0].data();
            let mut out = vec![0.0; src.len()];
            let mut inv_std = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mean = (0..n).map(|j| src[base + j * inner]).sum::<f64>() / n as f64;
                    let var = (0..n)
                        .map(|j| (src[base + j * inner] - mean).powi(2))
                        .sum::<f64>()
                        / n as f64;
                    let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for j in 0..n {
                        out[base + j * inner] = (src[base + j * inner] - mean) * is;
                    }
                    inv_std.push(is);
                }
            }
            (Tensor::from_parts(x[0].shape().to_vec(), out), inv_std)
        }
        OpKind::Concat { axis } => {
            let first = x[0];
            check_axis("concat", first, *axis)?;
            let mut total = 0;
            for t in x {
                if t.rank() != first.rank()
                    || t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .any(|(d, (p, q))| d != *axis && p != q)
                {
                    return Err(Error::shape("concat", format!("{:?} vs {:?}", t.shape(), first.shape())));
                }
                total += t.shape()[*axis];
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            let (outer, _, inner) = axis_split(&shape, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in x {
                    let w = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            (Tensor::from_parts(shape, out), none())
        }
        OpKind::Slice { axis, start, len } => {
            let t = x[0];
            check_axis("slice", t, *axis)?;
            if *len == 0 || start + len > t.shape()[*axis] {
                return Err(Error::shape("slice", format!("[{start}, {start}+{len}) of {:?} axis {axis}", t.shape())));
            }
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[*axis] = *len;
            (Tensor::from_parts(shape, out), none())
        }
        OpKind::Mean { axis } => {
            let t = x[0];
            check_axis("mean", t, *axis)?;
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let row = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= n as f64);
            let mut shape = t.shape().to_vec();
            shape.remove(*axis);
            (Tensor::from_parts(shape, out), none())
        }
        OpKind::Sum => (Tensor::scalar(x[0].data().iter().sum()), none()),
        OpKind::Conv1d => {
            let (xs, w, b) = (x[0], x[1], x[2]);
            let (n, cin, l, cout, k) = conv_dims(xs, w, b)?;
            let lo = l - k + 1;
            let mut out = vec![0.0; n * cout * lo];
            for s in 0..n {
                for o in 0..cout {
                    for t in 0..lo {
                        let mut acc = b.data()[o];
                        for c in 0..cin {
                            for q in 0..k {
                                acc += w.data()[(o * cin + c) * k + q] * xs.data()[(s * cin + c) * l + t + q];
                            }
                        }
                        out[(s * cout + o) * lo + t] = acc;
                    }
                }
            }
            (Tensor::from_parts(vec![n, cout, lo], out), none())
        }
        OpKind::Gather { indices } => {
            let table = x[0];
            if table.rank() != 2 || indices.is_empty() {
                return Err(Error::shape("embedding-gather", format!("table {:?}", table.shape())));
            }
            let (rows, d) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= rows {
                    return Err(Error::shape("embedding-gather", format!("index {i} >= {rows}")));
                }
                out.extend_from_slice(table.row(i));
            }
            (Tensor::from_parts(vec![indices.len(), d], out), none())
        }
        OpKind::Transpose { perm } => {
            let t = x[0];
            let mut seen = vec![false; t.rank()];
            if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape("transpose", format!("perm {perm:?} for {:?}", t.shape())));
            }
            (permute(t, perm), none())
        }
        OpKind::Reshape { shape } => {
            let t = x[0].clone().reshape(shape.clone())?;
            (t, none())
        }
        OpKind::FocalLoss { targets, rows, gamma } => {
            let t = x[0];
            if t.rank() < 1 || *gamma < 0.0 {
                return Err(Error::shape("focal-loss", "bad logits or gamma"));
            }
            let c = t.shape()[t.rank() - 1];
            let nrows = t.len() / c;
            if targets.len() != rows.len() || rows.is_empty() {
                return Err(Error::shape("focal-loss", "targets/rows mismatch or empty"));
            }
            if rows.iter().any(|&r| r >= nrows) || targets.iter().any(|&y| y >= c) {
                return Err(Error::shape("focal-loss", "row or target out of range"));
            }
            let mut probs = Vec::with_capacity(rows.len() * c);
            let mut total = 0.0;
            for (&r, &y) in rows.iter().zip(targets) {
                let p = softmax_row(&t.data()[r * c..(r + 1) * c]);
                let pt = p[y];
                if pt < PROB_FLOOR {
                    *clamp_events += 1;
                }
                total += focal_term(pt, *gamma);
                probs.extend(p);
            }
            (Tensor::scalar(total / rows.len() as f64), probs)
        }
    })
}

/// `-(1 - p)^gamma * ln(max(p, PROB_FLOOR))`.
pub(crate) fn focal_term(p: f64, gamma: f64) -> f64 {
    let pc = p.max(PROB_FLOOR);
    let w = if gamma == 0.0 { 1.0 } else { (1.0 - p).max(0.0).powf(gamma) };
    -w * pc.ln()
}

/// Derivative of [`focal_term`] with respect to `p`.
fn focal_term_dp(p: f64, gamma: f64) -> f64 {
    if p < PROB_FLOOR {
        // clamped region: constant in p
        return 0.0;
    }
    let q = (1.0 - p).max(0.0);
    let w = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let dw = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        -gamma * q.powf(gamma - 1.0)
    };
    -(dw * p.ln() + w / p)
}

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softmax_forward(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let m = (0..n).map(|j| src[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (src[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..n {
                out[base + j * inner] /= s;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 || b.rank() != 1 {
        return Err(Error::shape("conv1d", format!("{:?} {:?} {:?}", x.shape(), w.shape(), b.shape())));
    }
    let (n, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin2, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if cin != cin2 || b.shape()[0] != cout || k > l {
        return Err(Error::shape("conv1d", format!("{:?} {:?} {:?}", x.shape(), w.shape(), b.shape())));
    }
    Ok((n, cin, l, cout, k))
}

fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let src = t.data();
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn reduce_to_suffix(dy: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, v) in dy.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

fn backward(kind: &OpKind, x: &[&Tensor], y: &Tensor, dy: &Tensor, aux: &[f64]) -> Vec<Option<Tensor>> {
    let like = |t: &Tensor, data: Vec<f64>| Some(Tensor::from_parts(t.shape().to_vec(), data));
    let g = dy.data();
    match kind {
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let d = matmul_dims(a, b).expect("validated in forward");
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            if d.inner == 1 {
                let rows = d.outer * d.m;
                gemm(
                    MatRef::row_major(g, rows, d.n),
                    MatRef::row_major(b.data(), d.k, d.n).t(),
                    &mut da,
                    0.0,
                );
                gemm(
                    MatRef::row_major(a.data(), rows, d.k).t(),
                    MatRef::row_major(g, rows, d.n),
                    &mut db,
                    0.0,
                );
            } else {
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for o in 0..d.outer {
                    for i in 0..d.inner {
                        let ai = o * d.inner + i;
                        let gi = &g[ai * sc..(ai + 1) * sc];
                        gemm(
                            MatRef::row_major(gi, d.m, d.n),
                            MatRef::row_major(&b.data()[i * sb..(i + 1) * sb], d.k, d.n).t(),
                            &mut da[ai * sa..(ai + 1) * sa],
                            0.0,
                        );
                        gemm(
                            MatRef::row_major(&a.data()[ai * sa..(ai + 1) * sa], d.m, d.k).t(),
                            MatRef::row_major(gi, d.m, d.n),
                            &mut db[i * sb..(i + 1) * sb],
                            1.0,
                        );
                    }
                }
            }
            vec![like(a, da), like(b, db)]
        }
        OpKind::Add => vec![like(x[0], g.to_vec()), like(x[1], reduce_to_suffix(g, x[1].len()))],
        OpKind::Sub => {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![like(x[0], g.to_vec()), like(x[1], reduce_to_suffix(&neg, x[1].len()))]
        }
        OpKind::Mul => {
            let (a, b) = (x[0], x[1]);
            let nb = b.len();
            let da = g.iter().enumerate().map(|(i, v)| v * b.data()[i % nb]).collect();
            let prod: Vec<f64> = g.iter().zip(a.data()).map(|(v, p)| v * p).collect();
            vec![like(a, da), like(b, reduce_to_suffix(&prod, nb))]
        }
        OpKind::Scale(c) => vec![like(x[0], g.iter().map(|v| v * c).collect())],
        OpKind::Relu => vec![like(
            x[0],
            g.iter().zip(x[0].data()).map(|(v, &p)| if p > 0.0 { *v } else { 0.0 }).collect(),
        )],
        OpKind::Softmax { axis } => {
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let yv = y.data();
            let mut dx = vec![0.0; yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|j| g[base + j * inner] * yv[base + j * inner]).sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        dx[p] = yv[p] * (g[p] - dot);
                    }
                }
            }
            vec![like(x[0], dx)]
        }
        OpKind::LayerNorm { axis } => {
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let yv = y.data();
            let mut dx = vec![0.0; yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let is = aux[o * inner + i];
                    let mg = (0..n).map(|j| g[base + j * inner]).sum::<f64>() / n as f64;
                    let mgy = (0..n).map(|j| g[base + j * inner] * yv[base + j * inner]).sum::<f64>() / n as f64;
                    for j in 0..n {
                        let p = base + j * inner;
                        dx[p] = is * (g[p] - mg - yv[p] * mgy);
                    }
                }
            }
            vec![like(x[0], dx)]
        }
        OpKind::Concat { axis } => {
            let (outer, _, inner) = axis_split(y.shape(), *axis);
            let mut parts: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.len())).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (t, part) in x.iter().zip(&mut parts) {
                    let w = t.shape()[*axis] * inner;
                    part.extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            x.iter().zip(parts).map(|(t, p)| like(t, p)).collect()
        }
        OpKind::Slice { axis, start, len } => {
            let t = x[0];
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let mut dx = vec![0.0; t.len()];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                let w = len * inner;
                dx[base..base + w].copy_from_slice(&g[o * w..(o + 1) * w]);
            }
            vec![like(t, dx)]
        }
        OpKind::Mean { axis } => {
            let t = x[0];
            let (outer, n, inner) = axis_split(t.shape(), *axis);
            let mut dx = vec![0.0; t.len()];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        dx[(o * n + j) * inner + i] = g[o * inner + i] / n as f64;
                    }
                }
            }
            vec![like(t, dx)]
        }
        OpKind::Sum => vec![like(x[0], vec![g[0]; x[0].len()])],
        OpKind::Conv1d => {
            let (xs, w, b) = (x[0], x[1], x[2]);
            let (n, cin, l, cout, k) = conv_dims(xs, w, b).expect("validated in forward");
            let lo = l - k + 1;
            let mut dx = vec![0.0; xs.len()];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; b.len()];
            for s in 0..n {
                for o in 0..cout {
                    for t in 0..lo {
                        let go = g[(s * cout + o) * lo + t];
                        db[o] += go;
                        for c in 0..cin {
                            for q in 0..k {
                                let xi = (s * cin + c) * l + t + q;
                                let wi = (o * cin + c) * k + q;
                                dx[xi] += w.data()[wi] * go;
                                dw[wi] += xs.data()[xi] * go;
                            }
                        }
                    }
                }
            }
            vec![like(xs, dx), like(w, dw), like(b, db)]
        }
        OpKind::Gather { indices } => {
            let table = x[0];
            let d = table.shape()[1];
            let mut dt = vec![0.0; table.len()];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..d {
                    dt[i * d + c] += g[r * d + c];
                }
            }
            vec![like(table, dt)]
        }
        OpKind::Transpose { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute(dy, &inv))]
        }
        OpKind::Reshape { .. } => vec![like(x[0], g.to_vec())],
        OpKind::FocalLoss { targets, rows, gamma } => {
            let t = x[0];
            let c = t.shape()[t.rank() - 1];
            let scale = g[0] / rows.len() as f64;
            let mut dx = vec![0.0; t.len()];
            for (s, (&r, &yv)) in rows.iter().zip(targets).enumerate() {
                let p = &aux[s * c..(s + 1) * c];
                let pt = p[yv];
                let dl_dp = focal_term_dp(pt, *gamma);
                for j in 0..c {
                    let delta = if j == yv { 1.0 } else { 0.0 };
                    dx[r * c + j] += scale * dl_dp * pt * (delta - p[j]);
                }
            }
            vec![like(t, dx)]
        }
    }
}
