//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena of nodes built eagerly during the
//! forward pass. Every node stores its value; nodes whose result depends on a
//! `requires_grad` leaf also remember the primitive that produced them. Nodes
//! are appended after their inputs, so arena order is a topological order and
//! the graph is acyclic by construction.
//!
//! [`Graph::backward`] walks the arena in reverse from a scalar loss and
//! accumulates into the `grad` slot of every reachable leaf. Leaf gradients
//! accumulate across calls until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise, with trailing-suffix or scalar broadcasting of either side.
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// 2-D `(m x k) * (k x n)`.
    MatMul,
    /// 2-D transpose.
    Transpose,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// `axis: None` reduces over all elements.
    Sum { axis: Option<usize>, keep_dim: bool },
    Mean { axis: Option<usize>, keep_dim: bool },
    Relu,
    /// Tanh approximation.
    Gelu,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Softmax { axis: usize },
    /// Expands extent-1 axes to the target shape (ranks must agree).
    BroadcastTo(Vec<usize>),
    /// Selects entries along axis 0.
    Gather { indices: Vec<usize> },
    /// `x * mask` where the mask is usually a constant dropout mask.
    MaskApply,
    Pad { axis: usize, before: usize, after: usize, value: f64 },
    /// Valid 1-D convolution core. Input `(T x C_in)`, kernel `(C_out x C_in x k)`,
    /// output `(T_out x C_out)` with `T_out = (T - (k-1)*dilation - 1) / stride + 1`.
    Conv1d { stride: usize, dilation: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Softmax { .. } => "softmax",
            Primitive::BroadcastTo(_) => "broadcast",
            Primitive::Gather { .. } => "gather",
            Primitive::MaskApply => "mask_apply",
            Primitive::Pad { .. } => "pad",
            Primitive::Conv1d { .. } => "conv1d",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::MaskApply
            | Primitive::Conv1d { .. } => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Output shape as a pure function of input shapes and attributes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let name = self.name();
        let fail = |detail: String| Err(Error::shape(name, inputs, detail));
        match self.arity() {
            Some(n) if inputs.len() != n => {
                return fail(format!("expected {n} inputs, got {}", inputs.len()))
            }
            None if inputs.is_empty() => return fail("expected at least one input".into()),
            _ => {}
        }
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                match broadcast_shape(inputs[0], inputs[1]) {
                    Some(s) => Ok(s),
                    None => fail("operands do not broadcast".into()),
                }
            }
            Primitive::MaskApply => {
                if inputs[0] == inputs[1] {
                    Ok(inputs[0].to_vec())
                } else {
                    fail("mask must match input shape".into())
                }
            }
            Primitive::Scale(_)
            | Primitive::Relu
            | Primitive::Gelu
            | Primitive::Exp
            | Primitive::Log
            | Primitive::Sigmoid
            | Primitive::Tanh => Ok(inputs[0].to_vec()),
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.len() != 2 || b.len() != 2 {
                    return fail("operands must be 2-D".into());
                }
                if a[1] != b[0] {
                    return fail(format!("inner extents {} and {} differ", a[1], b[0]));
                }
                Ok(vec![a[0], b[1]])
            }
            Primitive::Transpose => {
                let a = inputs[0];
                if a.len() != 2 {
                    return fail("operand must be 2-D".into());
                }
                Ok(vec![a[1], a[0]])
            }
            Primitive::Reshape(shape) => {
                let n: usize = shape.iter().product();
                let m: usize = inputs[0].iter().product();
                if n != m {
                    return fail(format!("cannot reshape {m} elements into {shape:?}"));
                }
                Ok(shape.clone())
            }
            Primitive::Concat { axis } => {
                let first = inputs[0];
                if *axis >= first.len() {
                    return fail(format!("axis {axis} out of range"));
                }
                let mut out = first.to_vec();
                out[*axis] = 0;
                for s in inputs {
                    if s.len() != first.len()
                        || s.iter()
                            .zip(first)
                            .enumerate()
                            .any(|(i, (a, b))| i != *axis && a != b)
                    {
                        return fail("non-concatenated extents differ".into());
                    }
                    out[*axis] += s[*axis];
                }
                Ok(out)
            }
            Primitive::Slice { axis, start, len } => {
                let a = inputs[0];
                if *axis >= a.len() {
                    return fail(format!("axis {axis} out of range"));
                }
                if start + len > a[*axis] {
                    return fail(format!(
                        "range {start}..{} exceeds extent {}",
                        start + len,
                        a[*axis]
                    ));
                }
                let mut out = a.to_vec();
                out[*axis] = *len;
                Ok(out)
            }
            Primitive::Sum { axis, keep_dim } | Primitive::Mean { axis, keep_dim } => {
                let a = inputs[0];
                match axis {
                    None if *keep_dim => Ok(vec![1; a.len()]),
                    None => Ok(Vec::new()),
                    Some(ax) if *ax >= a.len() => fail(format!("axis {ax} out of range")),
                    Some(ax) => {
                        let mut out = a.to_vec();
                        if *keep_dim {
                            out[*ax] = 1;
                        } else {
                            out.remove(*ax);
                        }
                        Ok(out)
                    }
                }
            }
            Primitive::Softmax { axis } => {
                if *axis >= inputs[0].len() {
                    return fail(format!("axis {axis} out of range"));
                }
                Ok(inputs[0].to_vec())
            }
            Primitive::BroadcastTo(target) => {
                let a = inputs[0];
                if a.len() != target.len()
                    || a.iter().zip(target).any(|(&s, &t)| s != t && s != 1)
                {
                    return fail(format!("cannot broadcast to {target:?}"));
                }
                Ok(target.clone())
            }
            Primitive::Gather { indices } => {
                let a = inputs[0];
                if a.is_empty() {
                    return fail("cannot gather from a scalar".into());
                }
                if let Some(bad) = indices.iter().find(|&&i| i >= a[0]) {
                    return fail(format!("index {bad} out of range for extent {}", a[0]));
                }
                let mut out = a.to_vec();
                out[0] = indices.len();
                Ok(out)
            }
            Primitive::Pad {
                axis,
                before,
                after,
                ..
            } => {
                let a = inputs[0];
                if *axis >= a.len() {
                    return fail(format!("axis {axis} out of range"));
                }
                let mut out = a.to_vec();
                out[*axis] += before + after;
                Ok(out)
            }
            Primitive::Conv1d { stride, dilation } => {
                let (x, w) = (inputs[0], inputs[1]);
                if *stride < 1 || *dilation < 1 {
                    return fail(format!("stride {stride} and dilation {dilation} must be >= 1"));
                }
                if x.len() != 2 || w.len() != 3 {
                    return fail("expected (T x C_in) input and (C_out x C_in x k) kernel".into());
                }
                if x[1] != w[1] {
                    return fail(format!("input has {} channels, kernel expects {}", x[1], w[1]));
                }
                if w[2] < 1 {
                    return fail("kernel size must be >= 1".into());
                }
                let span = (w[2] - 1) * dilation + 1;
                if x[0] < span {
                    return fail(format!("input length {} shorter than kernel span {span}", x[0]));
                }
                Ok(vec![(x[0] - span) / stride + 1, w[0]])
            }
        }
    }
}

/// Result shape for elementwise binary operands: equal shapes, a scalar, or
/// one shape being a trailing suffix of the other.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    // A rank-0 shape is a suffix of everything.
    big.ends_with(small).then(|| big.to_vec())
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Primitive>,
    inputs: Vec<Var>,
    requires_grad: bool,
    /// im2col buffer kept by convolutions for the kernel gradient.
    saved: Option<Vec<T>>,
    grad: Option<Tensor<T>>,
}

/// Eagerly evaluated computation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// In strict mode every primitive rejects non-finite inputs.
    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
            saved: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
        let out_shape = prim.output_shape(&shapes)?;
        if self.strict && inputs.iter().any(|v| !self.value(*v).all_finite()) {
            return Err(Error::NonFinite {
                primitive: prim.name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let (data, saved) = self.forward(&prim, inputs, &out_shape);
        let value = Tensor::new(out_shape, data).expect("primitive produced consistent data");
        self.nodes.push(Node {
            value,
            op: requires_grad.then_some(prim),
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            requires_grad,
            saved: if requires_grad { saved } else { None },
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var], out_shape: &[usize]) -> (Vec<T>, Option<Vec<T>>) {
        let x = self.value(inputs[0]);
        let xd = x.data();
        let unary = |f: &dyn Fn(T) -> T| xd.iter().map(|&v| f(v)).collect::<Vec<T>>();
        let data = match prim {
            Primitive::Add => binary(x, self.value(inputs[1]), |a, b| a + b),
            Primitive::Sub => binary(x, self.value(inputs[1]), |a, b| a - b),
            Primitive::Mul | Primitive::MaskApply => binary(x, self.value(inputs[1]), |a, b| a * b),
            Primitive::Scale(c) => {
                let c = T::of(*c);
                unary(&|v| v * c)
            }
            Primitive::MatMul => {
                let b = self.value(inputs[1]);
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                let mut out = vec![T::zero(); m * n];
                T::gemm(m, k, n, xd, false, b.data(), false, &mut out, false);
                out
            }
            Primitive::Transpose => transpose(xd, x.shape()[0], x.shape()[1]),
            Primitive::Reshape(_) => xd.to_vec(),
            Primitive::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                concat(&parts, *axis, out_shape)
            }
            Primitive::Slice { axis, start, len } => {
                let (outer, ext, inner) = axis_split(x.shape(), *axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    out.extend_from_slice(&xd[base..base + len * inner]);
                }
                out
            }
            Primitive::Sum { axis, .. } => reduce_sum(x, *axis),
            Primitive::Mean { axis, .. } => {
                let count = match axis {
                    Some(a) => x.shape()[*a],
                    None => x.numel(),
                };
                let inv = T::one() / T::of(count as f64);
                reduce_sum(x, *axis).into_iter().map(|v| v * inv).collect()
            }
            Primitive::Relu => unary(&|v| if v > T::zero() { v } else { T::zero() }),
            Primitive::Gelu => unary(&gelu),
            Primitive::Exp => unary(&|v| v.exp()),
            Primitive::Log => unary(&|v| v.ln()),
            Primitive::Sigmoid => unary(&sigmoid),
            Primitive::Tanh => unary(&|v| v.tanh()),
            Primitive::Softmax { axis } => softmax(x, *axis),
            Primitive::BroadcastTo(target) => {
                let map = broadcast_index_map(x.shape(), target);
                map.iter().map(|&i| xd[i]).collect()
            }
            Primitive::Gather { indices } => {
                let row: usize = x.shape()[1..].iter().product();
                let mut out = Vec::with_capacity(indices.len() * row);
                for &i in indices {
                    out.extend_from_slice(&xd[i * row..(i + 1) * row]);
                }
                out
            }
            Primitive::Pad {
                axis,
                before,
                after,
                value,
            } => {
                let (outer, ext, inner) = axis_split(x.shape(), *axis);
                let fill = T::of(*value);
                let mut out = Vec::with_capacity(outer * (ext + before + after) * inner);
                for o in 0..outer {
                    out.extend(std::iter::repeat_n(fill, before * inner));
                    out.extend_from_slice(&xd[o * ext * inner..(o + 1) * ext * inner]);
                    out.extend(std::iter::repeat_n(fill, after * inner));
                }
                out
            }
            Primitive::Conv1d { stride, dilation } => {
                let w = self.value(inputs[1]);
                let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let t_out = out_shape[0];
                let cols = im2col(xd, c_in, k, t_out, *stride, *dilation);
                let mut out = vec![T::zero(); t_out * c_out];
                T::gemm(t_out, c_in * k, c_out, &cols, false, w.data(), true, &mut out, false);
                return (out, Some(cols));
            }
        };
        (data, None)
    }

    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.rank() != 0 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].op.is_none() {
                if self.nodes[i].requires_grad {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => {
                            node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                        }
                    }
                }
                continue;
            }
            let contributions = self.input_grads(i, &g);
            let node = &self.nodes[i];
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let op = node.op.as_ref().expect("interior node");
        let y = node.value.data();
        let needs = |j: usize| self.nodes[node.inputs[j].0].requires_grad;
        let x = self.value(node.inputs[0]);
        let xd = x.data();
        let elementwise = |f: &dyn Fn(usize) -> T| -> Vec<Option<Vec<T>>> {
            vec![Some((0..g.len()).map(|k| g[k] * f(k)).collect())]
        };
        match op {
            Primitive::Add | Primitive::Sub => {
                let b = self.value(node.inputs[1]);
                let ga = needs(0).then(|| reduce_broadcast(g, x.numel()));
                let gb = needs(1).then(|| {
                    let mut r = reduce_broadcast(g, b.numel());
                    if *op == Primitive::Sub {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                vec![ga, gb]
            }
            Primitive::Mul | Primitive::MaskApply => {
                let b = self.value(node.inputs[1]);
                let bd = b.data();
                let (na, nb) = (xd.len(), bd.len());
                let ga = needs(0).then(|| {
                    let mut r = vec![T::zero(); na];
                    for k in 0..g.len() {
                        r[k % na] += g[k] * bd[k % nb];
                    }
                    r
                });
                let gb = needs(1).then(|| {
                    let mut r = vec![T::zero(); nb];
                    for k in 0..g.len() {
                        r[k % nb] += g[k] * xd[k % na];
                    }
                    r
                });
                vec![ga, gb]
            }
            Primitive::Scale(c) => {
                let c = T::of(*c);
                vec![Some(g.iter().map(|&v| v * c).collect())]
            }
            Primitive::MatMul => {
                let b = self.value(node.inputs[1]);
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                let ga = needs(0).then(|| {
                    let mut r = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, b.data(), true, &mut r, false);
                    r
                });
                let gb = needs(1).then(|| {
                    let mut r = vec![T::zero(); k * n];
                    T::gemm(k, m, n, xd, true, g, false, &mut r, false);
                    r
                });
                vec![ga, gb]
            }
            Primitive::Transpose => {
                vec![Some(transpose(g, x.shape()[1], x.shape()[0]))]
            }
            Primitive::Reshape(_) => vec![Some(g.to_vec())],
            Primitive::Concat { axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let ext = self.shape(*v)[*axis];
                        let start = offset;
                        offset += ext;
                        needs(j).then(|| {
                            let mut r = Vec::with_capacity(outer * ext * inner);
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                r.extend_from_slice(&g[base..base + ext * inner]);
                            }
                            r
                        })
                    })
                    .collect()
            }
            Primitive::Slice { axis, start, len } => {
                let (outer, ext, inner) = axis_split(x.shape(), *axis);
                let mut r = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    r[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(r)]
            }
            Primitive::Sum { axis, .. } | Primitive::Mean { axis, .. } => {
                let scale = match op {
                    Primitive::Mean { .. } => {
                        let count = axis.map_or(x.numel(), |a| x.shape()[a]);
                        T::one() / T::of(count as f64)
                    }
                    _ => T::one(),
                };
                let r = match axis {
                    None => vec![g[0] * scale; x.numel()],
                    Some(a) => {
                        let (outer, ext, inner) = axis_split(x.shape(), *a);
                        let mut r = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            let row = &g[o * inner..(o + 1) * inner];
                            for _ in 0..ext {
                                r.extend(row.iter().map(|&v| v * scale));
                            }
                        }
                        r
                    }
                };
                vec![Some(r)]
            }
            Primitive::Relu => elementwise(&|k| if xd[k] > T::zero() { T::one() } else { T::zero() }),
            Primitive::Gelu => elementwise(&|k| gelu_grad(xd[k])),
            Primitive::Exp => elementwise(&|k| y[k]),
            Primitive::Log => elementwise(&|k| T::one() / xd[k]),
            Primitive::Sigmoid => elementwise(&|k| y[k] * (T::one() - y[k])),
            Primitive::Tanh => elementwise(&|k| T::one() - y[k] * y[k]),
            Primitive::Softmax { axis } => {
                let (outer, ext, inner) = axis_split(x.shape(), *axis);
                let mut r = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |e: usize| (o * ext + e) * inner + i;
                        let dot: T = (0..ext).map(|e| g[idx(e)] * y[idx(e)]).sum();
                        for e in 0..ext {
                            r[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                        }
                    }
                }
                vec![Some(r)]
            }
            Primitive::BroadcastTo(target) => {
                let map = broadcast_index_map(x.shape(), target);
                let mut r = vec![T::zero(); x.numel()];
                for (k, &src) in map.iter().enumerate() {
                    r[src] += g[k];
                }
                vec![Some(r)]
            }
            Primitive::Gather { indices } => {
                let row: usize = x.shape()[1..].iter().product();
                let mut r = vec![T::zero(); x.numel()];
                for (j, &i) in indices.iter().enumerate() {
                    for c in 0..row {
                        r[i * row + c] += g[j * row + c];
                    }
                }
                vec![Some(r)]
            }
            Primitive::Pad {
                axis,
                before,
                after,
                ..
            } => {
                let (outer, ext, inner) = axis_split(x.shape(), *axis);
                let padded = ext + before + after;
                let mut r = Vec::with_capacity(x.numel());
                for o in 0..outer {
                    let base = (o * padded + before) * inner;
                    r.extend_from_slice(&g[base..base + ext * inner]);
                }
                vec![Some(r)]
            }
            Primitive::Conv1d { stride, dilation } => {
                let w = self.value(node.inputs[1]);
                let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let t_out = node.value.shape()[0];
                let ck = c_in * k;
                let gx = needs(0).then(|| {
                    let mut dcols = vec![T::zero(); t_out * ck];
                    T::gemm(t_out, c_out, ck, g, false, w.data(), false, &mut dcols, false);
                    col2im(&dcols, x.shape()[0], c_in, k, t_out, *stride, *dilation)
                });
                let gw = needs(1).then(|| {
                    let cols = node.saved.as_ref().expect("conv keeps its columns");
                    let mut r = vec![T::zero(); c_out * ck];
                    T::gemm(c_out, t_out, ck, g, true, cols, false, &mut r, false);
                    r
                });
                vec![gx, gw]
            }
        }
    }
}

// Convenience wrappers, one per primitive.
impl<T: Float> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }
    pub fn sum(&mut self, a: Var, axis: Option<usize>, keep_dim: bool) -> Result<Var> {
        self.apply(Primitive::Sum { axis, keep_dim }, &[a])
    }
    pub fn mean(&mut self, a: Var, axis: Option<usize>, keep_dim: bool) -> Result<Var> {
        self.apply(Primitive::Mean { axis, keep_dim }, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[a])
    }
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::BroadcastTo(shape.to_vec()), &[a])
    }
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { indices }, &[a])
    }
    pub fn mask_apply(&mut self, a: Var, mask: Var) -> Result<Var> {
        self.apply(Primitive::MaskApply, &[a, mask])
    }
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize, value: f64) -> Result<Var> {
        self.apply(
            Primitive::Pad {
                axis,
                before,
                after,
                value,
            },
            &[a],
        )
    }
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, dilation: usize) -> Result<Var> {
        self.apply(Primitive::Conv1d { stride, dilation }, &[x, kernel])
    }

    /// `1 / a`, composed as `exp(-log(a))`; valid for positive inputs.
    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        let l = self.log(a)?;
        let n = self.scale(l, -1.0)?;
        self.exp(n)
    }
}

fn binary<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    if ad.len() == bd.len() {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = ad.len().max(bd.len());
    (0..n).map(|k| f(ad[k % ad.len()], bd[k % bd.len()])).collect()
}

fn reduce_broadcast<T: Float>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut r = vec![T::zero(); n];
    for (k, &v) in g.iter().enumerate() {
        r[k % n] += v;
    }
    r
}

fn transpose<T: Float>(d: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

fn concat<T: Float>(parts: &[&Tensor<T>], axis: usize, out_shape: &[usize]) -> Vec<T> {
    let (outer, _, inner) = axis_split(out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

fn reduce_sum<T: Float>(x: &Tensor<T>, axis: Option<usize>) -> Vec<T> {
    match axis {
        None => vec![x.data().iter().copied().sum()],
        Some(a) => {
            let (outer, ext, inner) = axis_split(x.shape(), a);
            let xd = x.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for e in 0..ext {
                    let src = &xd[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                    for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            out
        }
    }
}

fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Vec<T> {
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * ext + e) * inner + i;
            let max = (0..ext).map(|e| xd[idx(e)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in 0..ext {
                let v = (xd[idx(e)] - max).exp();
                out[idx(e)] = v;
                total += v;
            }
            for e in 0..ext {
                out[idx(e)] = out[idx(e)] / total;
            }
        }
    }
    out
}

/// For every output element of a broadcast, the flat source index.
fn broadcast_index_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let n: usize = to.iter().product();
    let rank = to.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if from[d] == 1 { 0 } else { stride };
        stride *= from[d];
    }
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * 0.044715) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Float>(x: &[T], c_in: usize, k: usize, t_out: usize, stride: usize, dilation: usize) -> Vec<T> {
    let ck = c_in * k;
    let mut cols = vec![T::zero(); t_out * ck];
    for t in 0..t_out {
        let row = &mut cols[t * ck..(t + 1) * ck];
        for j in 0..k {
            let src = (t * stride + j * dilation) * c_in;
            for ci in 0..c_in {
                row[ci * k + j] = x[src + ci];
            }
        }
    }
    cols
}

fn col2im<T: Float>(
    dcols: &[T],
    t_in: usize,
    c_in: usize,
    k: usize,
    t_out: usize,
    stride: usize,
    dilation: usize,
) -> Vec<T> {
    let ck = c_in * k;
    let mut dx = vec![T::zero(); t_in * c_in];
    for t in 0..t_out {
        let row = &dcols[t * ck..(t + 1) * ck];
        for j in 0..k {
            let dst = (t * stride + j * dilation) * c_in;
            for ci in 0..c_in {
                dx[dst + ci] += row[ci * k + j];
            }
        }
    }
    dx
}
