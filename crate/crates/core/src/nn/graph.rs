//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with its forward value. [`Graph::backward`] walks the tape in reverse and
//! returns [`Gradients`] for every leaf that requires them. Matrices are
//! row-major `[rows, cols]`; sequence tensors use `[channels, time]`.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{check_shape, Tensor, TensorId};
use crate::scalar::{gemm, MatRef, Scalar};

/// Backward rule for an operation implemented outside this module.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product. Returns one gradient (or `None`) per input.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

#[derive(Debug, Clone, Copy)]
enum Unary<T> {
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(T),
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    ClampMin(T),
    Clamp(T, T),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    len: usize,
    width: usize,
    dilation: usize,
    pad_left: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Offset(usize),
    AddBias(usize, usize),
    Unary(usize, Unary<T>),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Conv1d { x: usize, w: usize, geom: ConvGeom },
    Softmax(usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ShiftCols { x: usize, k: usize },
    Sum(usize),
    Embed { table: usize, ids: Vec<usize> },
    Reshape(usize),
    Broadcast(usize),
    Norm2(usize),
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<TensorId>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<TensorId, usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a recorded value. Cheap to copy; tied to its graph's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    id: usize,
    g: &'g Graph<T>,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("{what} expects a 2-D tensor, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), bound: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, shape, op, requires_grad, param: None });
        Var { id: nodes.len() - 1, g: self }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Result<Var<'_, T>> {
        check_shape(shape, data.len())?;
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    /// Leaf that records a gradient, not tied to any stored tensor.
    pub fn variable(&self, data: Vec<T>, shape: &[usize]) -> Result<Var<'_, T>> {
        check_shape(shape, data.len())?;
        Ok(self.push(data, shape.to_vec(), Op::Leaf, true))
    }

    /// Binds a tensor into the graph. Repeated binds of the same tensor share
    /// one leaf. Gradients are recorded only if the tensor requires them.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.bound.borrow().get(&t.id()) {
            return Var { id, g: self };
        }
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad());
        self.nodes.borrow_mut()[v.id].param = Some(t.id());
        self.bound.borrow_mut().insert(t.id(), v.id);
        v
    }

    /// Binds a tensor as a constant regardless of its `requires_grad` flag.
    pub fn frozen(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Records a value produced by an external forward computation.
    pub fn custom(
        &self,
        inputs: &[Var<'_, T>],
        value: Vec<T>,
        shape: &[usize],
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var<'_, T>> {
        check_shape(shape, value.len())?;
        let rg = inputs.iter().any(|v| self.rg(v.id));
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(value, shape.to_vec(), Op::Custom { inputs: ids, op }, rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        let mut by_tensor = HashMap::new();
        let mut leaves = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[i].take() {
                    if let Some(pid) = node.param {
                        by_tensor.insert(pid, i);
                    }
                    leaves.insert(i, g);
                }
            }
        }
        Ok(Gradients { leaves, by_tensor })
    }
}

fn acc<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let ConvGeom { c_in, len, width, dilation, pad_left, .. } = *geom;
    let mut cols = vec![T::zero(); c_in * width * len];
    for ci in 0..c_in {
        let src = &x[ci * len..(ci + 1) * len];
        for k in 0..width {
            let row = &mut cols[(ci * width + k) * len..(ci * width + k + 1) * len];
            let off = (k * dilation) as isize - pad_left as isize;
            let t0 = (-off).max(0) as usize;
            let t1 = ((len as isize - off).min(len as isize)).max(0) as usize;
            for t in t0..t1 {
                row[t] = src[(t as isize + off) as usize];
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], geom: &ConvGeom, dx: &mut [T]) {
    let ConvGeom { c_in, len, width, dilation, pad_left, .. } = *geom;
    for ci in 0..c_in {
        for k in 0..width {
            let row = &cols[(ci * width + k) * len..(ci * width + k + 1) * len];
            let off = (k * dilation) as isize - pad_left as isize;
            let t0 = (-off).max(0) as usize;
            let t1 = ((len as isize - off).min(len as isize)).max(0) as usize;
            for t in t0..t1 {
                dx[ci * len + (t as isize + off) as usize] += row[t];
            }
        }
    }
}

fn unary_grad<T: Scalar>(u: Unary<T>, x: T, y: T) -> T {
    match u {
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Tanh => T::one() - y * y,
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::LeakyRelu(a) => {
            if x > T::zero() {
                T::one()
            } else {
                a
            }
        }
        Unary::Exp => y,
        Unary::Log => T::one() / x,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Square => x + x,
        Unary::Sqrt => {
            if y > T::zero() {
                T::of(0.5) / y
            } else {
                T::zero()
            }
        }
        Unary::ClampMin(lo) => {
            if x > lo {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Clamp(lo, hi) => {
            if x > lo && x < hi {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| nodes[id].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(ga) = acc(grads, nodes, id) {
                    ga.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(s, &v)| *s -= v);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / vb[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(s, &v)| *s += *c * v);
            }
        }
        Op::Offset(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
            }
            let cols = node.shape[1];
            if let Some(gb) = acc(grads, nodes, *b) {
                for (r, s) in gb.iter_mut().enumerate() {
                    *s += g[r * cols..(r + 1) * cols].iter().fold(T::zero(), |a, &v| a + v);
                }
            }
        }
        Op::Unary(x, u) => {
            let vx = val(*x);
            let y = &node.value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * unary_grad(*u, vx[i], y[i]);
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = G · Bᵀ
                gemm(MatRef::new(g, *m, *n), MatRef::new(vb, *k, *n).t(), T::one(), ga);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · G
                gemm(MatRef::new(va, *m, *k).t(), MatRef::new(g, *m, *n), T::one(), gb);
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..*rows {
                    for j in 0..*cols {
                        gx[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }
        Op::Conv1d { x, w, geom } => {
            let kdim = geom.c_in * geom.width;
            if nodes[*w].requires_grad {
                let cols = im2col(val(*x), geom);
                let gw = acc(grads, nodes, *w).expect("requires grad");
                gemm(MatRef::new(g, geom.c_out, geom.len), MatRef::new(&cols, kdim, geom.len).t(), T::one(), gw);
            }
            if nodes[*x].requires_grad {
                let mut dcols = vec![T::zero(); kdim * geom.len];
                gemm(MatRef::new(val(*w), geom.c_out, kdim).t(), MatRef::new(g, geom.c_out, geom.len), T::zero(), &mut dcols);
                let gx = acc(grads, nodes, *x).expect("requires grad");
                col2im(&dcols, geom, gx);
            }
        }
        Op::Softmax(x) => {
            let cols = node.shape[1];
            let y = &node.value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..node.shape[0] {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for c in 0..cols {
                        gx[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let cols = node.shape[1];
            if let Some(gx) = acc(grads, nodes, *x) {
                let off = start * cols;
                gx[off..off + g.len()].iter_mut().zip(g).for_each(|(s, &v)| *s += v);
            }
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            let src_cols = nodes[*x].shape[1];
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * src_cols + start + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if let Some(gp) = acc(grads, nodes, p) {
                    gp.iter_mut().zip(&g[off..off + n]).for_each(|(s, &v)| *s += v);
                }
                off += n;
            }
        }
        Op::ShiftCols { x, k } => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..rows {
                    for t in 0..cols.saturating_sub(*k) {
                        gx[r * cols + t] += g[r * cols + t + k];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Embed { table, ids } => {
            let dim = nodes[*table].shape[1];
            let m = ids.len();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (j, &id) in ids.iter().enumerate() {
                    for e in 0..dim {
                        gt[id * dim + e] += g[e * m + j];
                    }
                }
            }
        }
        Op::Broadcast(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx[0] += g.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        Op::Norm2(x) => {
            let vx = val(*x);
            let norm = node.value[0];
            if norm > T::zero() {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for i in 0..vx.len() {
                        gx[i] += g[0] * vx[i] / norm;
                    }
                }
            }
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&[T]> = inputs.iter().map(|&i| val(i)).collect();
            let outs = op.backward(&ins, &node.value, g);
            for (&id, gi) in inputs.iter().zip(outs) {
                if let (Some(gi), Some(gx)) = (gi, acc(grads, nodes, id)) {
                    gx.iter_mut().zip(&gi).for_each(|(s, &v)| *s += v);
                }
            }
        }
    }
}

/// Gradients of leaves produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    by_tensor: HashMap<TensorId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf variable, if it influenced the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.leaves.get(&v.id).map(Vec::as_slice)
    }

    pub fn for_tensor(&self, id: TensorId) -> Option<&[T]> {
        self.by_tensor.get(&id).and_then(|n| self.leaves.get(n)).map(Vec::as_slice)
    }

    pub fn has_tensor(&self, id: TensorId) -> bool {
        self.by_tensor.contains_key(&id)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.g.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.rg(self.id)
    }

    /// Borrowed view of the value. Do not hold it across further graph operations.
    pub fn data(&self) -> Ref<'g, [T]> {
        Ref::map(self.g.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn value(&self) -> Vec<T> {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> T {
        self.g.nodes.borrow()[self.id].value[0]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let nodes = self.g.nodes.borrow();
        Tensor::new(nodes[self.id].value.clone(), &nodes[self.id].shape).expect("graph values are well-shaped")
    }

    fn dims(&self, what: &str) -> Result<(usize, usize)> {
        dims2(&self.g.nodes.borrow()[self.id].shape, what)
    }

    fn same_shape(&self, other: Var<'g, T>, what: &str) -> Result<Vec<usize>> {
        let nodes = self.g.nodes.borrow();
        let (a, b) = (&nodes[self.id].shape, &nodes[other.id].shape);
        if a != b {
            return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(a.clone())
    }

    fn binary(self, other: Var<'g, T>, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Self> {
        let shape = self.same_shape(other, what)?;
        let value = {
            let nodes = self.g.nodes.borrow();
            nodes[self.id].value.iter().zip(&nodes[other.id].value).map(|(&a, &b)| f(a, b)).collect()
        };
        let rg = self.g.rg(self.id) || self.g.rg(other.id);
        Ok(self.g.push(value, shape, op, rg))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    fn map(self, f: impl Fn(T) -> T, op: Op<T>) -> Self {
        let (value, shape) = {
            let nodes = self.g.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().map(|&v| f(v)).collect(), n.shape.clone())
        };
        self.g.push(value, shape, op, self.g.rg(self.id))
    }

    pub fn scale(self, c: T) -> Self {
        self.map(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Self {
        self.scale(-T::one())
    }

    pub fn offset(self, c: T) -> Self {
        self.map(|v| v + c, Op::Offset(self.id))
    }

    fn unary(self, u: Unary<T>, f: impl Fn(T) -> T) -> Self {
        self.map(f, Op::Unary(self.id, u))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Unary::Sigmoid, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn tanh(self) -> Self {
        self.unary(Unary::Tanh, |v| v.tanh())
    }

    pub fn relu(self) -> Self {
        self.unary(Unary::Relu, |v| v.max(T::zero()))
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        self.unary(Unary::LeakyRelu(slope), move |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn exp(self) -> Self {
        self.unary(Unary::Exp, |v| v.exp())
    }

    pub fn ln(self) -> Self {
        self.unary(Unary::Log, |v| v.ln())
    }

    pub fn abs(self) -> Self {
        self.unary(Unary::Abs, |v| v.abs())
    }

    pub fn square(self) -> Self {
        self.unary(Unary::Square, |v| v * v)
    }

    pub fn sqrt(self) -> Self {
        self.unary(Unary::Sqrt, |v| v.sqrt())
    }

    /// `max(x, lo)` with zero gradient where clamped.
    pub fn clamp_min(self, lo: T) -> Self {
        self.unary(Unary::ClampMin(lo), move |v| v.max(lo))
    }

    pub fn clamp(self, lo: T, hi: T) -> Self {
        self.unary(Unary::Clamp(lo, hi), move |v| v.max(lo).min(hi))
    }

    /// Adds a per-row bias `b[rows]` to a `[rows, cols]` matrix.
    pub fn add_bias(self, bias: Var<'g, T>) -> Result<Self> {
        let (rows, cols) = self.dims("add_bias")?;
        if bias.numel() != rows {
            return Err(Error::shape(format!("bias of {} for {rows} rows", bias.numel())));
        }
        let value = {
            let nodes = self.g.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            (0..rows * cols).map(|i| x[i] + b[i / cols]).collect()
        };
        let rg = self.g.rg(self.id) || self.g.rg(bias.id);
        Ok(self.g.push(value, vec![rows, cols], Op::AddBias(self.id, bias.id), rg))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        let (m, k) = self.dims("matmul lhs")?;
        let (k2, n) = other.dims("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.g.nodes.borrow();
            gemm(MatRef::new(&nodes[self.id].value, m, k), MatRef::new(&nodes[other.id].value, k, n), T::zero(), &mut out);
        }
        let rg = self.g.rg(self.id) || self.g.rg(other.id);
        Ok(self.g.push(out, vec![m, n], Op::MatMul { a: self.id, b: other.id, m, k, n }, rg))
    }

    pub fn transpose(self) -> Result<Self> {
        let (rows, cols) = self.dims("transpose")?;
        let value = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = vec![T::zero(); rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = x[i * cols + j];
                }
            }
            out
        };
        Ok(self.g.push(value, vec![cols, rows], Op::Transpose { x: self.id, rows, cols }, self.g.rg(self.id)))
    }

    /// 1-D convolution of `[c_in, len]` with kernel `[c_out, c_in, width]`.
    /// Inputs are zero-padded by `pad_left` on the left and by whatever keeps
    /// the output length equal to `len` on the right.
    pub fn conv1d(self, kernel: Var<'g, T>, dilation: usize, pad_left: usize) -> Result<Self> {
        let (c_in, len) = self.dims("conv1d input")?;
        let kshape = kernel.shape();
        let [c_out, kc_in, width] = kshape[..] else {
            return Err(Error::shape(format!("conv1d kernel must be 3-D, got {kshape:?}")));
        };
        if kc_in != c_in {
            return Err(Error::shape(format!("conv1d kernel expects {kc_in} input channels, got {c_in}")));
        }
        if dilation == 0 || width == 0 {
            return Err(Error::config("conv1d width and dilation must be positive"));
        }
        let geom = ConvGeom { c_in, c_out, len, width, dilation, pad_left };
        let mut out = vec![T::zero(); c_out * len];
        {
            let nodes = self.g.nodes.borrow();
            let cols = im2col(&nodes[self.id].value, &geom);
            gemm(MatRef::new(&nodes[kernel.id].value, c_out, c_in * width), MatRef::new(&cols, c_in * width, len), T::zero(), &mut out);
        }
        let rg = self.g.rg(self.id) || self.g.rg(kernel.id);
        Ok(self.g.push(out, vec![c_out, len], Op::Conv1d { x: self.id, w: kernel.id, geom }, rg))
    }

    /// Row-wise softmax. With a mask (`true` = allowed), disallowed entries
    /// are exactly zero and each row renormalizes over its allowed entries.
    pub fn softmax_rows(self, mask: Option<&[bool]>) -> Result<Self> {
        let (rows, cols) = self.dims("softmax")?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape(format!("mask of {} for [{rows}x{cols}] scores", m.len())));
            }
        }
        let allowed = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = vec![T::zero(); rows * cols];
        {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id].value;
            for r in 0..rows {
                let idx = r * cols..(r + 1) * cols;
                let mut mx = T::neg_infinity();
                for i in idx.clone() {
                    if allowed(i) {
                        mx = mx.max(x[i]);
                    }
                }
                if mx == T::neg_infinity() {
                    return Err(Error::MaskedRow { row: r });
                }
                let mut s = T::zero();
                for i in idx.clone() {
                    if allowed(i) {
                        out[i] = (x[i] - mx).exp();
                        s += out[i];
                    }
                }
                for i in idx {
                    out[i] /= s;
                }
            }
        }
        Ok(self.g.push(out, vec![rows, cols], Op::Softmax(self.id), self.g.rg(self.id)))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = self.dims("slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::shape(format!("rows {start}..{} of {rows}", start + len)));
        }
        let value = self.g.nodes.borrow()[self.id].value[start * cols..(start + len) * cols].to_vec();
        Ok(self.g.push(value, vec![len, cols], Op::SliceRows { x: self.id, start }, self.g.rg(self.id)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = self.dims("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::shape(format!("cols {start}..{} of {cols}", start + len)));
        }
        let value = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id].value;
            (0..rows).flat_map(|r| x[r * cols + start..r * cols + start + len].iter().copied()).collect()
        };
        Ok(self.g.push(value, vec![rows, len], Op::SliceCols { x: self.id, start }, self.g.rg(self.id)))
    }

    /// Delays every row by `k` columns, filling the first `k` with zeros.
    pub fn shift_cols(self, k: usize) -> Result<Self> {
        let (rows, cols) = self.dims("shift_cols")?;
        let value = {
            let nodes = self.g.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for t in k..cols {
                    out[r * cols + t] = x[r * cols + t - k];
                }
            }
            out
        };
        Ok(self.g.push(value, vec![rows, cols], Op::ShiftCols { x: self.id, k }, self.g.rg(self.id)))
    }

    pub fn sum(self) -> Self {
        let v = self.data().iter().fold(T::zero(), |a, &b| a + b);
        self.g.push(vec![v], vec![1], Op::Sum(self.id), self.g.rg(self.id))
    }

    pub fn mean(self) -> Self {
        let n = T::of_usize(self.numel());
        self.sum().scale(T::one() / n)
    }

    /// Euclidean norm of all elements, with zero subgradient at the origin.
    pub fn norm2(self) -> Self {
        let v = self.data().iter().fold(T::zero(), |a, &b| a + b * b).sqrt();
        self.g.push(vec![v], vec![1], Op::Norm2(self.id), self.g.rg(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.numel())?;
        Ok(self.g.push(self.value(), shape.to_vec(), Op::Reshape(self.id), self.g.rg(self.id)))
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn broadcast(self, shape: &[usize]) -> Result<Self> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("broadcast source must hold one value, has {}", self.numel())));
        }
        let n = shape.iter().product();
        Ok(self.g.push(vec![self.item(); n], shape.to_vec(), Op::Broadcast(self.id), self.g.rg(self.id)))
    }

    /// Stacks `[r_i, cols]` matrices vertically.
    pub fn concat_rows(parts: &[Var<'g, T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let g = first.g;
        let (_, cols) = first.dims("concat_rows")?;
        let mut rows = 0;
        let mut value = Vec::new();
        for p in parts {
            let (r, c) = p.dims("concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows columns {c} vs {cols}")));
            }
            rows += r;
            value.extend_from_slice(&p.data());
        }
        let rg = parts.iter().any(|p| g.rg(p.id));
        Ok(g.push(value, vec![rows, cols], Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Column lookup: `table` is `[vocab, dim]`, output is `[dim, ids.len()]`.
    pub fn embed(self, ids: &[usize]) -> Result<Self> {
        let (vocab, dim) = self.dims("embedding table")?;
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let m = ids.len();
        let value = {
            let nodes = self.g.nodes.borrow();
            let t = &nodes[self.id].value;
            let mut out = vec![T::zero(); dim * m];
            for (j, &id) in ids.iter().enumerate() {
                for e in 0..dim {
                    out[e * m + j] = t[id * dim + e];
                }
            }
            out
        };
        Ok(self.g.push(value, vec![dim, m], Op::Embed { table: self.id, ids: ids.to_vec() }, self.g.rg(self.id)))
    }
}
