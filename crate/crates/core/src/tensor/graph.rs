//! Static expression graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once for a fixed set of shapes and then evaluated
//! many times against different leaf bindings. Node ids are issued in
//! construction order, so that order is also a valid topological order.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;

use super::array::{numel, Array};
use super::TensorError;
use crate::real::Real;

/// Stabilizer inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Norm floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String, trainable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Transpose(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, end: usize },
    Reshape(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Broadcast(NodeId),
    Scale(NodeId, f64),
    L2Norm(NodeId),
    Cosine(NodeId, NodeId),
    Detach(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Broadcast(_) => "broadcast",
            Op::Scale(..) => "scale",
            Op::L2Norm(_) => "l2_norm",
            Op::Cosine(..) => "cosine",
            Op::Detach(_) => "detach",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// Some trainable leaf reaches this node through non-detached edges.
    needs_grad: bool,
}

/// Expression graph over named leaves.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: IndexMap<String, NodeId>,
    outputs: IndexMap<String, NodeId>,
}

/// Source of leaf values for an evaluation.
pub trait Bindings<T> {
    fn get(&self, name: &str) -> Option<&Array<T>>;
}

impl<T> Bindings<T> for HashMap<String, Array<T>> {
    fn get(&self, name: &str) -> Option<&Array<T>> {
        HashMap::get(self, name)
    }
}

impl<T> Bindings<T> for BTreeMap<String, Array<T>> {
    fn get(&self, name: &str) -> Option<&Array<T>> {
        BTreeMap::get(self, name)
    }
}

impl<T> Bindings<T> for IndexMap<String, Array<T>> {
    fn get(&self, name: &str) -> Option<&Array<T>> {
        IndexMap::get(self, name)
    }
}

/// Looks names up in `first`, then in `second`.
pub struct Chain<'a, T>(pub &'a dyn Bindings<T>, pub &'a dyn Bindings<T>);

impl<T> Bindings<T> for Chain<'_, T> {
    fn get(&self, name: &str) -> Option<&Array<T>> {
        self.0.get(name).or_else(|| self.1.get(name))
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    /// Names of leaves that receive gradients.
    pub fn trainable_leaves(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.leaves.iter().filter_map(|(n, &id)| match &self.nodes[id.0].op {
            Op::Leaf { trainable: true, .. } => Some((n.as_str(), id)),
            _ => None,
        })
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { trainable, .. } => *trainable,
            Op::Detach(_) => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Cosine(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::MatMul { a, b, .. } => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Concat { parts, .. } => parts.iter().any(|p| self.nodes[p.0].needs_grad),
            Op::Transpose(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::LayerNorm(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Broadcast(x)
            | Op::Scale(x, _)
            | Op::L2Norm(x) => self.nodes[x.0].needs_grad,
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
    }

    fn add_leaf(&mut self, name: &str, shape: &[usize], trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            assert_eq!(self.shape(id), shape, "leaf {name} redeclared with another shape");
            return id;
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                trainable,
            },
            shape.to_vec(),
        );
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Differentiable leaf. Re-declaring a name returns the existing node.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.add_leaf(name, shape, true)
    }

    /// Leaf that never receives a gradient (inputs, replayed traces).
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.add_leaf(name, shape, false)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || is_suffix(sb, sa) || (sb.is_empty()) {
            Ok(sa.to_vec())
        } else {
            Err(Self::mismatch(op, sa, sb))
        }
    }

    /// Elementwise sum; `b` may broadcast along leading axes of `a` or be a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.binary(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.binary(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let s = self.binary(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Self::mismatch("matmul", &sa, &sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Self::mismatch("matmul", &sa, &sb));
        }
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_t(a, b, false, true)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Self::mismatch("transpose", &s, &[]));
        }
        Ok(self.push(Op::Transpose(x), vec![s[1], s[0]]))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Self::mismatch("concat", &first, &[]));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Self::mismatch("concat", &first, s));
            }
            out[axis] += s[axis];
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            out,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::BadSlice {
                shape: s,
                axis,
                start,
                end,
            });
        }
        let mut out = s;
        out[axis] = end - start;
        Ok(self.push(Op::Slice { x, axis, start, end }, out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Self::mismatch("reshape", self.shape(x), shape));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    fn unary(&mut self, x: NodeId, op: Op) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(op, s)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softmax(x))
    }

    /// Normalization over the last axis without affine terms.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::LayerNorm(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, Op::Scale(x, c))
    }

    /// Stop-gradient: identity forward, no backward flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Detach(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), Vec::new())
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), Vec::new())
    }

    /// Repeat `x` along new leading axes so that it takes `shape`.
    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        if !is_suffix(self.shape(x), shape) {
            return Err(Self::mismatch("broadcast", self.shape(x), shape));
        }
        Ok(self.push(Op::Broadcast(x), shape.to_vec()))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let out = s[..s.len().saturating_sub(1)].to_vec();
        self.push(Op::L2Norm(x), out)
    }

    /// Cosine similarity over the last axis.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) || self.shape(a).is_empty() {
            return Err(Self::mismatch("cosine", self.shape(a), self.shape(b)));
        }
        let s = self.shape(a);
        let out = s[..s.len() - 1].to_vec();
        Ok(self.push(Op::Cosine(a, b), out))
    }

    /// `x W + b` for `x: [n, i]`, `W: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Evaluate every node against `bindings`.
    pub fn forward<'a, T: Real>(&self, bindings: &'a dyn Bindings<T>) -> Result<Evaluation<'a, T>, TensorError> {
        let mut values: Vec<Cow<'a, Array<T>>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v: Cow<'a, Array<T>> = match &node.op {
                Op::Leaf { name, .. } => {
                    let arr = bindings
                        .get(name)
                        .ok_or_else(|| TensorError::UnboundLeaf(name.clone()))?;
                    if arr.shape() != node.shape.as_slice() {
                        return Err(TensorError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: arr.shape().to_vec(),
                        });
                    }
                    Cow::Borrowed(arr)
                }
                op => Cow::Owned(forward_op(op, &node.shape, &values)),
            };
            if let Cow::Owned(arr) = &v {
                if !arr.is_finite() {
                    return Err(TensorError::NonFinite {
                        node: idx,
                        op: node.op.name(),
                    });
                }
            }
            values.push(v);
        }
        Ok(Evaluation { values })
    }
}

/// Values of every node from one forward pass.
pub struct Evaluation<'a, T: Real> {
    values: Vec<Cow<'a, Array<T>>>,
}

impl<'a, T: Real> Evaluation<'a, T> {
    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn output(&self, graph: &Graph, name: &str) -> Option<&Array<T>> {
        graph.output(name).map(|id| self.value(id))
    }

    /// Reverse pass. Each seed is the cotangent of one node; the result
    /// holds `d(sum_k <seed_k, node_k>) / d(leaf)` for every trainable leaf.
    pub fn backward(&self, graph: &Graph, seeds: &[(NodeId, &Array<T>)]) -> Result<Gradients<T>, TensorError> {
        let mut grads: Vec<Option<Array<T>>> = vec![None; graph.nodes.len()];
        for &(id, seed) in seeds {
            if seed.shape() != graph.shape(id) {
                return Err(TensorError::SeedShape {
                    expected: graph.shape(id).to_vec(),
                    got: seed.shape().to_vec(),
                });
            }
            accumulate(&mut grads[id.0], seed.clone());
        }
        for idx in (0..graph.nodes.len()).rev() {
            let node = &graph.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backward_op(graph, idx, &node.op, &node.shape, &g, &self.values, &mut grads);
        }
        let mut leaves = IndexMap::new();
        for (name, id) in graph.trainable_leaves() {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Array::zeros(graph.shape(id)));
            leaves.insert(name.to_string(), g);
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients for every trainable leaf, in declaration order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: IndexMap<String, Array<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.leaves.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> IndexMap<String, Array<T>> {
        self.leaves
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array<T>>, g: Array<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    c: &mut [T],
    beta: T,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass row-major buffers whose extents match (m,k,n) under
    // the given strides; `c` is a distinct allocation.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strides for reading a stored `[r, c]` matrix, optionally transposed.
fn view<'a, T>(data: &'a [T], stored: &[usize], transposed: bool) -> (&'a [T], isize, isize) {
    let cols = stored[1] as isize;
    if transposed {
        (data, 1, cols)
    } else {
        (data, cols, 1)
    }
}

fn suffix_reduce<T: Real>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); inner];
    for chunk in g.chunks_exact(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn binary_forward<T: Real>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let bl = b.len();
    let bd = b.data();
    if bl == a.len() {
        a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect()
    }
}

fn forward_op<T: Real>(op: &Op, shape: &[usize], vals: &[Cow<'_, Array<T>>]) -> Array<T> {
    let v = |id: &NodeId| -> &Array<T> { &vals[id.0] };
    let data: Vec<T> = match op {
        Op::Leaf { .. } => unreachable!("leaves are bound, not computed"),
        Op::Add(a, b) => binary_forward(v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => binary_forward(v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => binary_forward(v(a), v(b), |x, y| x * y),
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (v(a), v(b));
            let (m, n) = (shape[0], shape[1]);
            let k = if *ta { av.shape()[0] } else { av.shape()[1] };
            let mut out = vec![T::zero(); m * n];
            gemm(
                m,
                k,
                n,
                view(av.data(), av.shape(), *ta),
                view(bv.data(), bv.shape(), *tb),
                &mut out,
                T::zero(),
            );
            out
        }
        Op::Transpose(x) => {
            let xv = v(x);
            let (r, c) = (xv.shape()[0], xv.shape()[1]);
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xv.data()[i * c + j];
                }
            }
            out
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split3(shape, *axis);
            let mut out = Vec::with_capacity(numel(shape));
            for o in 0..outer {
                for p in parts {
                    let pv = v(p);
                    let len = pv.shape()[*axis] * inner;
                    out.extend_from_slice(&pv.data()[o * len..(o + 1) * len]);
                }
            }
            out
        }
        Op::Slice { x, axis, start, end } => {
            let xv = v(x);
            let (outer, len, inner) = split3(xv.shape(), *axis);
            let mut out = Vec::with_capacity(numel(shape));
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&xv.data()[base + start * inner..base + end * inner]);
            }
            out
        }
        Op::Reshape(x) | Op::Detach(x) => v(x).data().to_vec(),
        Op::Softmax(x) => {
            let xv = v(x);
            let w = xv.last_dim();
            let mut out = xv.data().to_vec();
            for row in out.chunks_exact_mut(w) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - mx).exp();
                    s += *e;
                }
                let inv = T::one() / s;
                for e in row.iter_mut() {
                    *e *= inv;
                }
            }
            out
        }
        Op::LayerNorm(x) => {
            let xv = v(x);
            let w = xv.last_dim();
            let wt = T::lit(w as f64);
            let eps = T::lit(LAYER_NORM_EPS);
            let mut out = xv.data().to_vec();
            for row in out.chunks_exact_mut(w) {
                let mean = row.iter().copied().sum::<T>() / wt;
                let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / wt;
                let inv = T::one() / (var + eps).sqrt();
                for e in row.iter_mut() {
                    *e = (*e - mean) * inv;
                }
            }
            out
        }
        Op::Relu(x) => v(x).data().iter().map(|&e| e.max(T::zero())).collect(),
        Op::Sigmoid(x) => v(x).data().iter().map(|&e| sigmoid(e)).collect(),
        Op::Tanh(x) => v(x).data().iter().map(|&e| e.tanh()).collect(),
        Op::Exp(x) => v(x).data().iter().map(|&e| e.exp()).collect(),
        Op::Log(x) => v(x).data().iter().map(|&e| e.ln()).collect(),
        Op::Sum(x) => vec![v(x).sum()],
        Op::Mean(x) => vec![v(x).sum() / T::lit(v(x).len() as f64)],
        Op::Broadcast(x) => {
            let xv = v(x);
            let reps = numel(shape) / xv.len().max(1);
            let mut out = Vec::with_capacity(numel(shape));
            for _ in 0..reps {
                out.extend_from_slice(xv.data());
            }
            out
        }
        Op::Scale(x, c) => {
            let c = T::lit(*c);
            v(x).data().iter().map(|&e| e * c).collect()
        }
        Op::L2Norm(x) => {
            let xv = v(x);
            xv.data()
                .chunks_exact(xv.last_dim())
                .map(|r| r.iter().map(|&e| e * e).sum::<T>().sqrt())
                .collect()
        }
        Op::Cosine(a, b) => {
            let (av, bv) = (v(a), v(b));
            let w = av.last_dim();
            av.data()
                .chunks_exact(w)
                .zip(bv.data().chunks_exact(w))
                .map(|(x, y)| cosine_parts(x, y).0)
                .collect()
        }
    };
    Array::new(shape, data).expect("forward kernels produce the declared shape")
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// (cosine, dot, clamped |x|, clamped |y|, x-norm active, y-norm active)
fn cosine_parts<T: Real>(x: &[T], y: &[T]) -> (T, T, T, T, bool, bool) {
    let eps = T::lit(COSINE_EPS);
    let dot: T = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    let nx = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let ny = y.iter().map(|&a| a * a).sum::<T>().sqrt();
    let (cx, ax) = if nx > eps { (nx, true) } else { (eps, false) };
    let (cy, ay) = if ny > eps { (ny, true) } else { (eps, false) };
    (dot / (cx * cy), dot, cx, cy, ax, ay)
}

fn backward_op<T: Real>(
    graph: &Graph,
    own: usize,
    op: &Op,
    shape: &[usize],
    g: &Array<T>,
    vals: &[Cow<'_, Array<T>>],
    grads: &mut [Option<Array<T>>],
) {
    let needs = |id: &NodeId| graph.nodes[id.0].needs_grad;
    let v = |id: &NodeId| -> &Array<T> { &vals[id.0] };
    let mk = |id: &NodeId, data: Vec<T>| Array::new(graph.shape(*id), data).expect("grad shape");
    match op {
        Op::Leaf { .. } | Op::Detach(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg = matches!(op, Op::Sub(..));
            if needs(a) {
                accumulate(&mut grads[a.0], g.clone());
            }
            if needs(b) {
                let bl = v(b).len();
                let mut gb = if bl == g.len() {
                    g.data().to_vec()
                } else {
                    suffix_reduce(g.data(), bl)
                };
                if neg {
                    gb.iter_mut().for_each(|e| *e = -*e);
                }
                accumulate(&mut grads[b.0], mk(b, gb));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (v(a), v(b));
            let bl = bv.len();
            if needs(a) {
                let ga = binary_forward(g, bv, |x, y| x * y);
                accumulate(&mut grads[a.0], mk(a, ga));
            }
            if needs(b) {
                let prod: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                let gb = if bl == prod.len() { prod } else { suffix_reduce(&prod, bl) };
                accumulate(&mut grads[b.0], mk(b, gb));
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (v(a), v(b));
            let (m, n) = (shape[0], shape[1]);
            let k = if *ta { av.shape()[0] } else { av.shape()[1] };
            let gv = (g.data(), n as isize, 1isize);
            let gt = (g.data(), 1isize, n as isize);
            if needs(a) {
                let mut ga = vec![T::zero(); m * k];
                if *ta {
                    // stored a is [k, m]: dA = B_eff g^T
                    gemm(k, n, m, view(bv.data(), bv.shape(), *tb), gt, &mut ga, T::zero());
                } else {
                    // dA = g B_eff^T
                    gemm(m, n, k, gv, view(bv.data(), bv.shape(), !*tb), &mut ga, T::zero());
                }
                accumulate(&mut grads[a.0], mk(a, ga));
            }
            if needs(b) {
                let mut gb = vec![T::zero(); k * n];
                if *tb {
                    // stored b is [n, k]: dB = g^T A_eff
                    gemm(n, m, k, gt, view(av.data(), av.shape(), *ta), &mut gb, T::zero());
                } else {
                    // dB = A_eff^T g
                    gemm(k, m, n, view(av.data(), av.shape(), !*ta), gv, &mut gb, T::zero());
                }
                accumulate(&mut grads[b.0], mk(b, gb));
            }
        }
        Op::Transpose(x) => {
            if needs(x) {
                let (r, c) = (shape[0], shape[1]);
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g.data()[i * c + j];
                    }
                }
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split3(shape, *axis);
            let mut offset = 0;
            for p in parts {
                let len = graph.shape(*p)[*axis];
                if needs(p) {
                    let mut out = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        out.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    accumulate(&mut grads[p.0], mk(p, out));
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start, end } => {
            if needs(x) {
                let xs = graph.shape(*x);
                let (outer, len, inner) = split3(xs, *axis);
                let width = (end - start) * inner;
                let slot = &mut grads[x.0];
                if slot.is_none() {
                    *slot = Some(Array::zeros(xs));
                }
                let acc = slot.as_mut().expect("initialized").data_mut();
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    for (d, &s) in acc[base..base + width]
                        .iter_mut()
                        .zip(&g.data()[o * width..(o + 1) * width])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if needs(x) {
                accumulate(&mut grads[x.0], mk(x, g.data().to_vec()));
            }
        }
        Op::Softmax(x) => {
            if needs(x) {
                let y = &vals[own];
                let w = y.last_dim();
                let mut out = vec![T::zero(); y.len()];
                for ((yr, gr), orow) in y
                    .data()
                    .chunks_exact(w)
                    .zip(g.data().chunks_exact(w))
                    .zip(out.chunks_exact_mut(w))
                {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &yy), &gg) in orow.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::LayerNorm(x) => {
            if needs(x) {
                let xv = v(x);
                let w = xv.last_dim();
                let wt = T::lit(w as f64);
                let eps = T::lit(LAYER_NORM_EPS);
                let mut out = vec![T::zero(); xv.len()];
                for ((xr, gr), orow) in xv
                    .data()
                    .chunks_exact(w)
                    .zip(g.data().chunks_exact(w))
                    .zip(out.chunks_exact_mut(w))
                {
                    let mean = xr.iter().copied().sum::<T>() / wt;
                    let var = xr.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / wt;
                    let inv = T::one() / (var + eps).sqrt();
                    let gm = gr.iter().copied().sum::<T>() / wt;
                    let gy = xr
                        .iter()
                        .zip(gr)
                        .map(|(&e, &gg)| (e - mean) * inv * gg)
                        .sum::<T>()
                        / wt;
                    for ((o, &e), &gg) in orow.iter_mut().zip(xr).zip(gr) {
                        let y = (e - mean) * inv;
                        *o = inv * (gg - gm - y * gy);
                    }
                }
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::Relu(x) => {
            if needs(x) {
                let out = v(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gg)| if e > T::zero() { gg } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::Sigmoid(x) | Op::Tanh(x) | Op::Exp(x) => {
            if needs(x) {
                let out = v(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gg)| match op {
                        Op::Sigmoid(_) => {
                            let s = sigmoid(e);
                            gg * s * (T::one() - s)
                        }
                        Op::Tanh(_) => {
                            let t = e.tanh();
                            gg * (T::one() - t * t)
                        }
                        _ => gg * e.exp(),
                    })
                    .collect();
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::Log(x) => {
            if needs(x) {
                let out = v(x).data().iter().zip(g.data()).map(|(&e, &gg)| gg / e).collect();
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            if needs(x) {
                let n = graph.shape(*x).iter().product::<usize>();
                let mut s = g.item();
                if matches!(op, Op::Mean(_)) {
                    s /= T::lit(n as f64);
                }
                accumulate(&mut grads[x.0], Array::full(graph.shape(*x), s));
            }
        }
        Op::Broadcast(x) => {
            if needs(x) {
                let out = suffix_reduce(g.data(), v(x).len());
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::Scale(x, c) => {
            if needs(x) {
                let c = T::lit(*c);
                accumulate(&mut grads[x.0], g.map(|e| e * c));
            }
        }
        Op::L2Norm(x) => {
            if needs(x) {
                let xv = v(x);
                let w = xv.last_dim();
                let mut out = vec![T::zero(); xv.len()];
                for ((xr, &gg), orow) in xv.data().chunks_exact(w).zip(g.data()).zip(out.chunks_exact_mut(w)) {
                    let n = xr.iter().map(|&e| e * e).sum::<T>().sqrt();
                    if n > T::zero() {
                        for (o, &e) in orow.iter_mut().zip(xr) {
                            *o = gg * e / n;
                        }
                    }
                }
                accumulate(&mut grads[x.0], mk(x, out));
            }
        }
        Op::Cosine(a, b) => {
            let (av, bv) = (v(a), v(b));
            let w = av.last_dim();
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for (i, &gg) in g.data().iter().enumerate() {
                let (x, y) = (&av.data()[i * w..(i + 1) * w], &bv.data()[i * w..(i + 1) * w]);
                let (c, _, cx, cy, ax, ay) = cosine_parts(x, y);
                let denom = cx * cy;
                for j in 0..w {
                    let mut da = y[j] / denom;
                    if ax {
                        da -= c * x[j] / (cx * cx);
                    }
                    let mut db = x[j] / denom;
                    if ay {
                        db -= c * y[j] / (cy * cy);
                    }
                    ga[i * w + j] = gg * da;
                    gb[i * w + j] = gg * db;
                }
            }
            if needs(a) {
                accumulate(&mut grads[a.0], mk(a, ga));
            }
            if needs(b) {
                accumulate(&mut grads[b.0], mk(b, gb));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, ParamSet};

    fn bind(pairs: &[(&str, Array<f64>)]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for (n, a) in pairs {
            p.insert(*n, a.clone());
        }
        p
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param("x", &[3]);
        let y = g.softmax(x);
        let b = bind(&[("x", Array::zeros(&[3]))]);
        let ev = g.forward(&b).unwrap();
        for &v in ev.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.param("x", &[2, 4]);
        let y = g.layer_norm(x);
        let b = bind(&[("x", Array::full(&[2, 4], 3.25))]);
        let ev = g.forward(&b).unwrap();
        assert!(ev.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input("i", &[3, 3]);
        let a = g.param("a", &[3, 3]);
        let y = g.matmul(i, a).unwrap();
        let av = Array::from_fn(&[3, 3], |k| (k as f64 * 0.731).sin());
        let b = bind(&[("i", Array::eye(3)), ("a", av.clone())]);
        assert_eq!(g.forward(&b).unwrap().value(y), &av);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", &[2, 3]);
        let s = g.sum(x);
        let b = bind(&[("x", Array::from_fn(&[2, 3], |k| k as f64))]);
        let ev = g.forward(&b).unwrap();
        let gr = ev.backward(&g, &[(s, &Array::scalar(1.0))]).unwrap();
        assert_eq!(gr.get("x").unwrap(), &Array::ones(&[2, 3]));
    }

    #[test]
    fn softmax_backward_matches_closed_form_jacobian() {
        let mut g = Graph::new();
        let x = g.param("x", &[4]);
        let y = g.softmax(x);
        let b = bind(&[("x", Array::zeros(&[4]))]);
        let seed = Array::new(&[4], vec![0.3, -1.2, 0.5, 2.0]).unwrap();
        let ev = g.forward(&b).unwrap();
        let gr = ev.backward(&g, &[(y, &seed)]).unwrap();
        // J = diag(p) - p p^T with p = 1/4; J is symmetric so J^T s = J s.
        let p = 0.25;
        for i in 0..4 {
            let expect: f64 = (0..4)
                .map(|j| {
                    let jij = if i == j { p - p * p } else { -p * p };
                    jij * seed.data()[j]
                })
                .sum();
            assert!((gr.get("x").unwrap().data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_with_itself_is_stationary() {
        let mut g = Graph::new();
        let a = g.param("a", &[5]);
        let c = g.cosine(a, a).unwrap();
        let b = bind(&[("a", Array::new(&[5], vec![0.2, -1.0, 3.0, 0.7, 1.1]).unwrap())]);
        let ev = g.forward(&b).unwrap();
        assert!((ev.value(c).item() - 1.0).abs() < 1e-15);
        let gr = ev.backward(&g, &[(c, &Array::scalar(1.0))]).unwrap();
        assert!(gr.get("a").unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn quadratic_form_gradcheck() {
        let mut g = Graph::new();
        let x = g.param("x", &[1, 4]);
        let a = g.input("a", &[4, 4]);
        let xa = g.matmul(x, a).unwrap();
        let xax = g.matmul_nt(xa, x).unwrap();
        let b = bind(&[
            ("x", Array::from_fn(&[1, 4], |k| 0.5 - k as f64 * 0.3)),
            ("a", Array::from_fn(&[4, 4], |k| ((k * 7 % 5) as f64) - 1.7)),
        ]);
        assert!(finite_diff_check(&g, xax, &b, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn constant_expression_has_zero_error() {
        let mut g = Graph::new();
        let _x = g.param("x", &[3]);
        let c = g.input("c", &[3]);
        let y = g.exp(c);
        let b = bind(&[("x", Array::ones(&[3])), ("c", Array::ones(&[3]))]);
        assert_eq!(finite_diff_check(&g, y, &b, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]);
        let y = g.log(x);
        let empty = ParamSet::<f64>::new();
        assert!(matches!(g.forward(&empty), Err(TensorError::UnboundLeaf(_))));
        let wrong = bind(&[("x", Array::ones(&[3]))]);
        assert!(matches!(g.forward(&wrong), Err(TensorError::BindingShape { .. })));
        let neg = bind(&[("x", Array::full(&[2], -1.0))]);
        assert!(matches!(g.forward(&neg), Err(TensorError::NonFinite { .. })));
        let ok = bind(&[("x", Array::ones(&[2]))]);
        let ev = g.forward(&ok).unwrap();
        assert!(matches!(
            ev.backward(&g, &[(y, &Array::ones(&[3]))]),
            Err(TensorError::SeedShape { .. })
        ));
        let a = g.param("a", &[2, 3]);
        let b = g.param("b", &[2, 3]);
        assert!(g.matmul(a, b).is_err());
        assert!(g.add(a, x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &[2]);
        let _unused = g.param("u", &[3]);
        let s = g.sum(x);
        let b = bind(&[("x", Array::ones(&[2])), ("u", Array::ones(&[3]))]);
        let gr = g.forward(&b).unwrap().backward(&g, &[(s, &Array::scalar(1.0))]).unwrap();
        assert_eq!(gr.get("u").unwrap(), &Array::zeros(&[3]));
    }
}
