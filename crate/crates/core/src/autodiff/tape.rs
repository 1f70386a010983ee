use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::sparse::{Neighbors, Rulebook};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Right operand is a vector matching the last axis of the left operand.
    Row,
    /// Right operand holds a single element.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Sum,
    Mean,
    MeanRows,
    GlobalAvgPool,
    Max,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Clamp,
    Norm2,
    Softmax,
    LayerNorm,
    GatherRows,
    ScatterAdd,
    Conv2d,
    UpsampleTranspose,
    SmoothL1,
    Focal,
    SparseConv,
    KnnAttention,
    NeighborMean,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GlobalAvgPool(Var),
    Max { input: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Norm2(Var),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, inv_std: Vec<f64> },
    GatherRows { input: Var, index: Arc<Vec<u32>> },
    ScatterAdd { input: Var, index: Arc<Vec<u32>> },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    UpsampleTranspose { input: Var, weight: Var, factor: usize },
    SmoothL1 { pred: Var, target: Arc<Vec<f64>>, beta: f64 },
    Focal { logits: Var, labels: Arc<Vec<f64>>, weights: Arc<Vec<f64>>, alpha: f64, gamma: f64 },
    SparseConv { input: Var, weight: Var, rulebook: Arc<Rulebook> },
    KnnAttention { query: Var, keys: Var, values: Var, nbrs: Arc<Neighbors>, scale: f64, attn: Vec<f64> },
    NeighborMean { keys: Var, nbrs: Arc<Neighbors> },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::Max { .. } => OpKind::Max,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Norm2(..) => OpKind::Norm2,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterAdd { .. } => OpKind::ScatterAdd,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::UpsampleTranspose { .. } => OpKind::UpsampleTranspose,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::Focal { .. } => OpKind::Focal,
            Op::SparseConv { .. } => OpKind::SparseConv,
            Op::KnnAttention { .. } => OpKind::KnnAttention,
            Op::NeighborMean { .. } => OpKind::NeighborMean,
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Linear record of every operation evaluated in a forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a reverse sweep visits each node after all of its consumers.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
    pub(crate) fault: Option<(OpKind, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Split `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scale every input gradient produced by ops of `kind` by
    /// `factor`. Used to confirm gradient checks catch a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
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

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// requires grad and was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, &[sa, sb], "operands neither equal, row-broadcast nor scalar"))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let bc = self.broadcast_kind(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = match bc {
            Broadcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Row => {
                let n = bv.len();
                av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % n])).collect()
            }
        };
        Ok((Tensor::from_parts(av.shape().to_vec(), data), bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, bc), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, bc), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(av.shape().to_vec(), av.data().iter().map(|&x| x + c).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb], "expected [m,k] x [k,n]"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", &[], "no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &[&first], format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat", &shapes, format!("extents off axis {axis} differ")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape("slice", &[&s], format!("axis {axis} range {start}..{}", start + len)));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { input, axis, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (b, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("transpose", &[&s], "rank must be 2 or 3")),
        };
        let out = transpose_raw(self.value(input).data(), b, r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose(input), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let v: f64 = self.value(input).data().iter().sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(v), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.numel() == 0 {
            return Err(Error::shape("mean", &[t.shape()], "empty input"));
        }
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(v), Op::Mean(input), rg))
    }

    /// `[n, c] -> [c]`, averaging over rows.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("mean_rows", &[s], "expected non-empty [n, c]"));
        }
        let (n, c) = (s[0], s[1]);
        let d = self.value(input).data();
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, &x) in out.iter_mut().zip(&d[r * c..(r + 1) * c]) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::MeanRows(input), rg))
    }

    /// `[c, h, w] -> [c]`.
    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 || s[1] * s[2] == 0 {
            return Err(Error::shape("global_average_pool", &[s], "expected [c, h, w]"));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let d = self.value(input).data();
        let out: Vec<f64> = (0..c).map(|k| d[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool(input), rg))
    }

    /// Reduce-max over `axis`; ties resolve to the first index.
    pub fn max(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("max", &[&s], format!("bad axis {axis}")));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let d = self.value(input).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * ext * inner + i;
                for a in 1..ext {
                    let idx = o * ext * inner + a * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(k, _)| k != axis).map(|(_, &e)| e).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Max { input, argmax }, rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(input);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[input]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, math::sigmoid, Op::Sigmoid(input))
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, math::exp, Op::Exp(input))
    }

    pub fn log(&mut self, input: Var) -> Var {
        self.unary(input, math::ln, Op::Log(input))
    }

    pub fn sqrt(&mut self, input: Var) -> Var {
        self.unary(input, math::sqrt, Op::Sqrt(input))
    }

    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        self.unary(input, |x| x.clamp(lo, hi), Op::Clamp { input, lo, hi })
    }

    /// Euclidean norm of all elements. The subgradient at the origin is zero.
    pub fn norm2(&mut self, input: Var) -> Var {
        let n = math::sqrt(self.value(input).data().iter().map(|x| x * x).sum());
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(n), Op::Norm2(input), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("softmax", &[&s], format!("bad axis {axis}")));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let mut out = self.value(input).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * ext * inner + a * inner + i;
                let mut m = f64::NEG_INFINITY;
                for a in 0..ext {
                    m = m.max(out[at(a)]);
                }
                let mut z = 0.0;
                for a in 0..ext {
                    let e = math::exp(out[at(a)] - m);
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..ext {
                    out[at(a)] /= z;
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax { input, axis }, rg))
    }

    /// Normalize each row along the last axis to zero mean and unit
    /// (biased) variance. No affine parameters.
    pub fn layer_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let c = *s.last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::shape("layer_norm", &[&s], "empty last axis"));
        }
        let d = self.value(input).data();
        let rows = d.len() / c;
        let mut out = Vec::with_capacity(d.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / math::sqrt(var + eps);
            out.extend(row.iter().map(|x| (x - mu) * is));
            inv_std.push(is);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(s, out), Op::LayerNorm { input, inv_std }, rg))
    }

    /// Rows `index[j]` of a `[n, c]` tensor, stacked into `[m, c]`.
    pub fn gather_rows(&mut self, input: Var, index: Arc<Vec<u32>>) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", &[s], "expected [n, c]"));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n) {
            return Err(Error::shape("gather_rows", &[s], format!("row index {bad} out of range")));
        }
        let d = self.value(input).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            let i = i as usize;
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[input]);
        let shape = vec![index.len(), c];
        Ok(self.push(Tensor::from_parts(shape, out), Op::GatherRows { input, index }, rg))
    }

    /// Sum row `j` of a `[m, c]` tensor into output row `index[j]` of an
    /// `[n_out, c]` zero tensor.
    pub fn scatter_add(&mut self, input: Var, index: Arc<Vec<u32>>, n_out: usize) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::shape("scatter_add", &[s], format!("expected [{}, c]", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n_out) {
            return Err(Error::shape("scatter_add", &[s], format!("target row {bad} >= {n_out}")));
        }
        let c = s[1];
        let d = self.value(input).data();
        let mut out = vec![0.0; n_out * c];
        for (j, &i) in index.iter().enumerate() {
            let i = i as usize;
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(&d[j * c..(j + 1) * c]) {
                *o += x;
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(vec![n_out, c], out), Op::ScatterAdd { input, index }, rg))
    }

    /// Dense 2D convolution, `[c, h, w]` input, `[o, c, k, k]` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", &[&si, &sw], "expected [c,h,w] and [o,c,k,k]"));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(Error::shape("conv2d", &[&si, &sw, sb], "bias must be [o]"));
            }
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o_ch, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", &[&si, &sw], "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; o_ch * ho * wo];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for o in 0..o_ch {
                out[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v = bd[o]);
            }
        }
        conv2d_for_each(c, h, w, o_ch, k, stride, pad, ho, wo, |o, ci, ky, kx, oy, ox, iy, ix| {
            out[(o * ho + oy) * wo + ox] += wt[((o * c + ci) * k + ky) * k + kx] * x[(ci * h + iy) * w + ix];
        });
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![o_ch, ho, wo], out),
            Op::Conv2d { input, weight, bias, stride, pad },
            rg,
        ))
    }

    /// Transposed convolution with kernel = stride = `factor` (each input
    /// cell paints one `factor x factor` block), cropped to `out_h x out_w`.
    /// Input `[c, h, w]`, weight `[c, o, factor, factor]`.
    pub fn upsample_transpose(&mut self, input: Var, weight: Var, factor: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[0] != si[0] || sw[2] != factor || sw[3] != factor {
            return Err(Error::shape("upsample_transpose", &[&si, &sw], "expected [c,h,w] and [c,o,s,s]"));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let o_ch = sw[1];
        if h * factor < out_h || w * factor < out_w {
            return Err(Error::shape("upsample_transpose", &[&si, &sw], "output larger than upsampled extent"));
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; o_ch * out_h * out_w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(ci * h + y) * w + xx];
                    if v == 0.0 {
                        continue;
                    }
                    for o in 0..o_ch {
                        for dy in 0..factor {
                            let oy = y * factor + dy;
                            if oy >= out_h {
                                break;
                            }
                            for dx in 0..factor {
                                let ox = xx * factor + dx;
                                if ox >= out_w {
                                    break;
                                }
                                out[(o * out_h + oy) * out_w + ox] += v * wt[((ci * o_ch + o) * factor + dy) * factor + dx];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, weight]);
        Ok(self.push(
            Tensor::from_parts(vec![o_ch, out_h, out_w], out),
            Op::UpsampleTranspose { input, weight, factor },
            rg,
        ))
    }

    /// Elementwise smooth-L1 between `pred` and a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: Arc<Vec<f64>>, beta: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(Error::shape("smooth_l1", &[p.shape(), &[target.len()]], "target length differs"));
        }
        let out: Vec<f64> = p
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&x, &t)| {
                let d = (x - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let shape = p.shape().to_vec();
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SmoothL1 { pred, target, beta }, rg))
    }

    /// Elementwise sigmoid focal loss `w * -alpha_t (1 - p_t)^gamma ln p_t`
    /// with `labels` in {0, 1} and per-element weights (0 masks an element).
    pub fn focal(&mut self, logits: Var, labels: Arc<Vec<f64>>, weights: Arc<Vec<f64>>, alpha: f64, gamma: f64) -> Result<Var> {
        let l = self.value(logits);
        if l.numel() != labels.len() || l.numel() != weights.len() {
            return Err(Error::shape(
                "focal",
                &[l.shape(), &[labels.len()], &[weights.len()]],
                "labels/weights length differs",
            ));
        }
        let out: Vec<f64> = l
            .data()
            .iter()
            .zip(labels.iter().zip(weights.iter()))
            .map(|(&x, (&y, &wt))| if wt == 0.0 { 0.0 } else { wt * focal_value(x, y, alpha, gamma) })
            .collect();
        let shape = l.shape().to_vec();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Focal { logits, labels, weights, alpha, gamma }, rg))
    }

    /// Rulebook sparse convolution: `out[o] += x[i] W[k]` for each pair
    /// `(i, o)` of tap `k`. Input `[n_in, c_in]`, weight `[taps, c_in, c_out]`.
    pub fn sparse_conv(&mut self, input: Var, weight: Var, rulebook: Arc<Rulebook>) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 2 || sw.len() != 3 || sw[1] != si[1] || sw[0] != rulebook.kernel_volume() || si[0] != rulebook.n_in {
            return Err(Error::shape(
                "sparse_conv",
                &[&si, &sw],
                format!("rulebook expects {} rows and {} taps", rulebook.n_in, rulebook.kernel_volume()),
            ));
        }
        let (cin, cout) = (sw[1], sw[2]);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; rulebook.n_out * cout];
        for (k, pairs) in rulebook.taps.iter().enumerate() {
            let wk = &wt[k * cin * cout..(k + 1) * cin * cout];
            for &(i, o) in pairs {
                let xi = &x[i as usize * cin..(i as usize + 1) * cin];
                let orow = &mut out[o as usize * cout..(o as usize + 1) * cout];
                for (ci, &xv) in xi.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (ov, &wv) in orow.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let rg = self.rg(&[input, weight]);
        let shape = vec![rulebook.n_out, cout];
        Ok(self.push(Tensor::from_parts(shape, out), Op::SparseConv { input, weight, rulebook }, rg))
    }

    /// Per-query dot-product attention over a variable-length neighbor list:
    /// `out_i = sum_j softmax_j(scale * q_i . k_{n(i,j)}) v_{n(i,j)}`.
    /// Queries without neighbors produce a zero row.
    pub fn knn_attention(&mut self, query: Var, keys: Var, values: Var, nbrs: Arc<Neighbors>, scale: f64) -> Result<Var> {
        let sq = self.shape(query).to_vec();
        let sk = self.shape(keys).to_vec();
        let sv = self.shape(values).to_vec();
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] || nbrs.len() != sq[0] {
            return Err(Error::shape("knn_attention", &[&sq, &sk, &sv], "expected q [n,c], k [m,c], v [m,d], n lists"));
        }
        if nbrs.max_index().is_some_and(|i| i >= sk[0]) {
            return Err(Error::shape("knn_attention", &[&sq, &sk], "neighbor index out of range"));
        }
        let (n, c, dv) = (sq[0], sq[1], sv[1]);
        let q = self.value(query).data();
        let k = self.value(keys).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; n * dv];
        let mut attn = vec![0.0; nbrs.total()];
        for i in 0..n {
            let row = nbrs.row(i);
            if row.is_empty() {
                continue;
            }
            let base = nbrs.offsets()[i];
            let qi = &q[i * c..(i + 1) * c];
            let mut m = f64::NEG_INFINITY;
            for (j, &kj) in row.iter().enumerate() {
                let kr = &k[kj as usize * c..(kj as usize + 1) * c];
                let s = scale * dot(qi, kr);
                attn[base + j] = s;
                m = m.max(s);
            }
            let mut z = 0.0;
            for a in &mut attn[base..base + row.len()] {
                *a = math::exp(*a - m);
                z += *a;
            }
            let orow = &mut out[i * dv..(i + 1) * dv];
            for (j, &kj) in row.iter().enumerate() {
                let a = attn[base + j] / z;
                attn[base + j] = a;
                for (o, &vv) in orow.iter_mut().zip(&v[kj as usize * dv..(kj as usize + 1) * dv]) {
                    *o += a * vv;
                }
            }
        }
        let rg = self.rg(&[query, keys, values]);
        Ok(self.push(
            Tensor::from_parts(vec![n, dv], out),
            Op::KnnAttention { query, keys, values, nbrs, scale, attn },
            rg,
        ))
    }

    /// Mean of neighbor rows for each query; zero row when a query has none.
    pub fn neighbor_mean(&mut self, keys: Var, nbrs: Arc<Neighbors>) -> Result<Var> {
        let sk = self.shape(keys);
        if sk.len() != 2 || nbrs.max_index().is_some_and(|i| i >= sk[0]) {
            return Err(Error::shape("neighbor_mean", &[sk], "expected [m, c] covering all neighbor indices"));
        }
        let c = sk[1];
        let n = nbrs.len();
        let k = self.value(keys).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = nbrs.row(i);
            if row.is_empty() {
                continue;
            }
            let inv = 1.0 / row.len() as f64;
            let orow = &mut out[i * c..(i + 1) * c];
            for &kj in row {
                for (o, &x) in orow.iter_mut().zip(&k[kj as usize * c..(kj as usize + 1) * c]) {
                    *o += x;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[keys]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::NeighborMean { keys, nbrs }, rg))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(d: &[f64], b: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for bi in 0..b {
        let src = &d[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Visit every valid (output, tap, input) triple of a 2D convolution.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn conv2d_for_each(
    c: usize,
    h: usize,
    w: usize,
    o_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize),
) {
    for o in 0..o_ch {
        for ci in 0..c {
            for ky in 0..k {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            f(o, ci, ky, kx, oy, ox, iy as usize, ix as usize);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn focal_value(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = math::sigmoid(x);
    if y > 0.5 {
        // ln p = -softplus(-x)
        alpha * math::powf(1.0 - p, gamma) * math::softplus(-x)
    } else {
        (1.0 - alpha) * math::powf(p, gamma) * math::softplus(x)
    }
}

pub(crate) fn focal_grad(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = math::sigmoid(x);
    if y > 0.5 {
        let log_p = -math::softplus(-x);
        alpha * math::powf(1.0 - p, gamma) * (gamma * p * log_p - (1.0 - p))
    } else {
        let log_q = -math::softplus(x);
        (1.0 - alpha) * math::powf(p, gamma) * (p - gamma * (1.0 - p) * log_q)
    }
}
