//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the record in exact reverse order and
//! returns the gradient of every node that depends on a trainable leaf.
//!
//! A graph is single-use and confined to one thread; build a fresh one per
//! forward pass.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, strides, Scalar,
    Tensor,
};
use crate::error::{Error, Result};

/// Boolean attention mask over the last two axes `[queries, keys]` of a
/// logits tensor; `true` means the key may be attended.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    /// Lower-triangular mask: query `t` may see keys `0..=t`.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allowed[q * len + k] = true;
            }
        }
        Self {
            queries: len,
            keys: len,
            allowed,
        }
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SumAll(usize),
    SumAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::BroadcastTo(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::SumAll(x)
            | Op::SumAxis(x, _)
            | Op::Narrow { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(xs, _) => xs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record plus the values it produced.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to one recorded value.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to leaf `v`; zeros when `v` does
    /// not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = &self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.shared_leaf(Arc::new(t), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.shared_leaf(Arc::new(t), false)
    }

    pub fn shared_leaf(&self, t: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse pass from a scalar loss. The tape is released afterwards.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::Backward("tape already consumed".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                let contributions = backward_op(&nodes, id, &g)?;
                for (input, gi) in contributions {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            // Only leaf gradients are kept once propagated.
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for node in nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        self.consumed.set(true);
        Ok(Gradients { grads, shapes })
    }
}

fn backward_op<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
    let node = &nodes[id];
    let out = node.value.shape();
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to_shape(g, out, val(*a).shape())),
            (*b, reduce_to_shape(g, out, val(*b).shape())),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            vec![
                (*a, reduce_to_shape(g, out, val(*a).shape())),
                (*b, reduce_to_shape(&neg, out, val(*b).shape())),
            ]
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let sa = broadcast_strides(ta.shape(), out);
            let sb = broadcast_strides(tb.shape(), out);
            let mut ga = vec![T::zero(); ta.numel()];
            let mut gb = vec![T::zero(); tb.numel()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                ga[ia] += g[o] * db[ib];
                gb[ib] += g[o] * da[ia];
            });
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
        Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(val(*a), val(*b), g)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            vec![(*x, permute_data(g, out, &inverse))]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::BroadcastTo(x) => vec![(*x, reduce_to_shape(g, out, val(*x).shape()))],
        Op::Relu(x) => {
            let xd = val(*x).data();
            vec![(
                *x,
                g.iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
            )]
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            vec![(
                *x,
                g.iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect(),
            )]
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let width = *out.last().unwrap();
            let mut gx = vec![T::zero(); y.len()];
            for ((yr, gr), gxr) in y
                .chunks(width)
                .zip(g.chunks(width))
                .zip(gx.chunks_mut(width))
            {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..width {
                    gxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*x, gx)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *out.last().unwrap();
            let gd = val(*gain).data();
            let mut gx = vec![T::zero(); xhat.len()];
            let mut ggain = vec![T::zero(); d];
            let mut gbias = vec![T::zero(); d];
            let dn = T::from_f64(d as f64);
            for (r, ((xr, gr), gxr)) in xhat
                .chunks(d)
                .zip(g.chunks(d))
                .zip(gx.chunks_mut(d))
                .enumerate()
            {
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for j in 0..d {
                    let dxh = gr[j] * gd[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xr[j];
                    ggain[j] += gr[j] * xr[j];
                    gbias[j] += gr[j];
                }
                mean_dxhat /= dn;
                mean_dxhat_xhat /= dn;
                for j in 0..d {
                    let dxh = gr[j] * gd[j];
                    gxr[j] = rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                }
            }
            vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
        }
        Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
        Op::SumAxis(x, axis) => {
            let shape = val(*x).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let ext = shape[*axis];
            let mut gx = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                for e in 0..ext {
                    let dst = (o * ext + e) * inner;
                    gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*x, gx)]
        }
        Op::Concat(xs, axis) => {
            let outer: usize = out[..*axis].iter().product();
            let inner: usize = out[axis + 1..].iter().product();
            let total = out[*axis] * inner;
            let mut offset = 0;
            let mut res = Vec::with_capacity(xs.len());
            for &xi in xs {
                let w = val(xi).shape()[*axis] * inner;
                let mut gx = Vec::with_capacity(outer * w);
                for o in 0..outer {
                    gx.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                }
                offset += w;
                res.push((xi, gx));
            }
            res
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(*x).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let ext = shape[*axis];
            let len = out[*axis];
            let mut gx = vec![T::zero(); val(*x).numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * ext + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Embedding { table, ids } => {
            let t = val(*table);
            let d = t.shape()[1];
            let mut gt = vec![T::zero(); t.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g[r * d + j];
                }
            }
            vec![(*table, gt)]
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = *val(*logits).shape().last().unwrap();
            let mut gl = vec![T::zero(); probs.len()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    for j in 0..v {
                        gl[r * v + j] = g[0] * probs[r * v + j];
                    }
                    gl[r * v + t] -= g[0];
                }
            }
            vec![(*logits, gl)]
        }
        Op::L2Normalize { x, norms } => {
            let y = node.value.data();
            let d = *out.last().unwrap();
            let mut gx = vec![T::zero(); y.len()];
            for (r, ((yr, gr), gxr)) in y
                .chunks(d)
                .zip(g.chunks(d))
                .zip(gx.chunks_mut(d))
                .enumerate()
            {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..d {
                    gxr[j] = (gr[j] - yr[j] * dot) / norms[r];
                }
            }
            vec![(*x, gx)]
        }
    };
    Ok(res)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = Vec::with_capacity(data.len());
    for_each_broadcast(&out_shape, &walk, &zeros, |_, src, _| out.push(data[src]));
    out
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (offset into a, offset into b) per output batch, in units of elements.
    batches: Vec<(usize, usize)>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
        )));
    }
    let (k, kb) = (a[a.len() - 1], b[b.len() - 2]);
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {a:?} x {b:?} ({k} vs {kb})"
        )));
    }
    let n = b[b.len() - 1];
    if b.len() == 2 {
        // Fold every leading axis of `a` into the row count.
        let m: usize = a[..a.len() - 1].iter().product();
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(n);
        return Ok(MatMulPlan {
            m,
            k,
            n,
            out_shape,
            batches: vec![(0, 0)],
        });
    }
    let m = a[a.len() - 2];
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ba, bb)
        .map_err(|_| Error::Shape(format!("matmul batch axes not broadcastable: {a:?} x {b:?}")))?;
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut batches = Vec::new();
    if batch.is_empty() {
        batches.push((0, 0));
    } else {
        for_each_broadcast(&batch, &sa, &sb, |_, ia, ib| {
            batches.push((ia * m * k, ib * k * n))
        });
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        m,
        k,
        n,
        out_shape,
        batches,
    })
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = plan_matmul(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); p.out_shape.iter().product()];
    let (m, k, n) = (p.m, p.k, p.n);
    for (i, &(oa, ob)) in p.batches.iter().enumerate() {
        // SAFETY: offsets come from the plan and stay inside each buffer.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data().as_ptr().add(oa),
                k as isize,
                1,
                b.data().as_ptr().add(ob),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(i * m * n),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(&p.out_shape, out)
}

fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let p = plan_matmul(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for (i, &(oa, ob)) in p.batches.iter().enumerate() {
        // SAFETY: as in the forward pass; transposes are expressed through strides.
        unsafe {
            // dA = dC * B^T
            T::gemm(
                m,
                n,
                k,
                T::one(),
                g.as_ptr().add(i * m * n),
                n as isize,
                1,
                b.data().as_ptr().add(ob),
                1,
                n as isize,
                T::one(),
                ga.as_mut_ptr().add(oa),
                k as isize,
                1,
            );
            // dB = A^T * dC
            T::gemm(
                k,
                m,
                n,
                T::one(),
                a.data().as_ptr().add(oa),
                1,
                k as isize,
                g.as_ptr().add(i * m * n),
                n as isize,
                1,
                T::one(),
                gb.as_mut_ptr().add(ob),
                n as isize,
                1,
            );
        }
    }
    Ok((ga, gb))
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    fn binary(
        self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_shape(a.shape(), b.shape())
            .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        let mut data = Vec::with_capacity(out.iter().product());
        let (da, db) = (a.data(), b.data());
        for_each_broadcast(&out, &sa, &sb, |_, ia, ib| data.push(f(da[ia], db[ib])));
        self.graph.push(Tensor::new(&out, data)?, op, name)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Hadamard product with trailing-axis broadcasting.
    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: T) -> Result<Self> {
        let v = self.value().map(|x| x * c);
        self.graph.push(v, Op::Scale(self.id, c), "scale")
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        let v = matmul_forward(&self.value(), &other.value())?;
        self.graph.push(v, Op::MatMul(self.id, other.id), "matmul")
    }

    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        if axes.len() != x.ndim() || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!(
                "invalid permutation {axes:?} for shape {:?}",
                x.shape()
            )));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let data = permute_data(x.data(), x.shape(), axes);
        self.graph
            .push(Tensor::new(&shape, data)?, Op::Permute(self.id, axes.to_vec()), "permute")
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.graph.push(v, Op::Reshape(self.id), "reshape")
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let out = broadcast_shape(x.shape(), shape)?;
        if out != shape {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} to {shape:?}",
                x.shape()
            )));
        }
        let s = broadcast_strides(x.shape(), shape);
        let zeros = vec![0; shape.len()];
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_broadcast(shape, &s, &zeros, |_, i, _| data.push(x.data()[i]));
        self.graph
            .push(Tensor::new(shape, data)?, Op::BroadcastTo(self.id), "broadcast_to")
    }

    pub fn relu(self) -> Result<Self> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.graph.push(v, Op::Relu(self.id), "relu")
    }

    pub fn sigmoid(self) -> Result<Self> {
        let v = self.value().map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.graph.push(v, Op::Sigmoid(self.id), "sigmoid")
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Self> {
        self.masked_softmax(None)
    }

    /// Softmax over the last axis; masked keys get probability exactly 0.
    ///
    /// The mask covers the last two axes and is shared by all leading axes.
    pub fn masked_softmax(self, mask: Option<&Mask>) -> Result<Self> {
        let x = self.value();
        let shape = x.shape();
        let width = *shape.last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        if let Some(m) = mask {
            let nd = shape.len();
            if nd < 2 || shape[nd - 2] != m.queries || shape[nd - 1] != m.keys {
                return Err(Error::Shape(format!(
                    "mask [{}, {}] does not match logits {shape:?}",
                    m.queries, m.keys
                )));
            }
        }
        let mut out = vec![T::zero(); x.numel()];
        for (r, (xr, yr)) in x.data().chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let q = mask.map(|m| r % m.queries);
            let allowed = |j: usize| match (mask, q) {
                (Some(m), Some(q)) => m.is_allowed(q, j),
                _ => true,
            };
            let mut max = T::neg_infinity();
            for j in 0..width {
                if allowed(j) {
                    max = max.max(xr[j]);
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::FullyMasked {
                    row: q.unwrap_or(r),
                });
            }
            let mut sum = T::zero();
            for j in 0..width {
                if allowed(j) {
                    yr[j] = (xr[j] - max).exp();
                    sum += yr[j];
                }
            }
            for v in yr.iter_mut() {
                *v /= sum;
            }
        }
        self.graph
            .push(Tensor::new(shape, out)?, Op::Softmax(self.id), "softmax")
    }

    /// Normalize over the last axis, then apply per-feature gain and bias.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Self> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain {:?}/bias {:?} must be [{d}]",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = x.numel() / d;
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.graph.push(
            Tensor::new(x.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn sum(self) -> Result<Self> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id), "sum")
    }

    pub fn mean(self) -> Result<Self> {
        let n = T::from_f64(self.value().numel() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = (o * ext + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[src + i];
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape.remove(axis);
        self.graph
            .push(Tensor::new(&oshape, out)?, Op::SumAxis(self.id, axis), "sum_axis")
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        let ext = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis)?.scale(T::one() / T::from_f64(ext as f64))
    }

    /// Concatenate along the last axis; all other extents must agree.
    pub fn concat_last(parts: &[Var<'g, T>]) -> Result<Self> {
        let nd = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?
            .shape()
            .len();
        if nd == 0 {
            return Err(Error::Shape("cannot concat scalars".into()));
        }
        Self::concat(parts, nd - 1)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::Shape(format!(
                    "concat along axis {axis} needs matching extents, got {base:?} and {s:?}"
                )));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let mut data = Vec::with_capacity(values.iter().map(|v| v.numel()).sum());
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        first.graph.push(
            Tensor::new(&shape, data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            "concat",
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * ext + start) * inner;
            data.extend_from_slice(&x.data()[src..src + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        self.graph.push(
            Tensor::new(&oshape, data)?,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            "narrow",
        )
    }

    /// Gather rows of a `[V, D]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Self> {
        let t = self.value();
        if t.ndim() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-D, got {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup of no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("token id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        self.graph.push(
            Tensor::new(&[ids.len(), d], data)?,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// logits `[.., V]`. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Self> {
        let x = self.value();
        let v = *x.shape().last().ok_or_else(|| Error::Shape("cross_entropy of a scalar".into()))?;
        let rows = x.numel() / v;
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = vec![T::zero(); x.numel()];
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let xr = &x.data()[r * v..(r + 1) * v];
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = xr.iter().map(|&a| (a - max).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (xr[j] - max).exp() / sum;
            }
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Shape(format!("target {t} outside vocabulary of {v}")));
                }
                loss += sum.ln() + max - xr[t];
            }
        }
        self.graph.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Scale each last-axis row to unit L2 norm: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(self, eps: T) -> Result<Self> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| Error::Shape("l2_normalize of a scalar".into()))?;
        let mut out = vec![T::zero(); x.numel()];
        let mut norms = Vec::with_capacity(x.numel() / d);
        for (xr, yr) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            let n = (xr.iter().map(|&a| a * a).sum::<T>() + eps).sqrt();
            norms.push(n);
            for j in 0..d {
                yr[j] = xr[j] / n;
            }
        }
        self.graph.push(
            Tensor::new(x.shape(), out)?,
            Op::L2Normalize { x: self.id, norms },
            "l2_normalize",
        )
    }
}
