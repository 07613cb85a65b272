use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::kernels::{self, ConvGeom};
use super::{strides, Real, Tensor, TensorId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Recorded operation. Input fields are node indices on the same tape.
enum Op<T: Real> {
    Leaf(TensorId),
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    AddBias {
        input: usize,
        bias: usize,
        inner: usize,
    },
    Sum(usize),
    Max {
        input: usize,
        argmax: Vec<usize>,
    },
    LogSumExp(usize),
    Reshape(usize),
    Transpose {
        input: usize,
        perm: Vec<usize>,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Expand(usize),
    MaskedMerge {
        mask: Arc<Vec<T>>,
        on: usize,
        off: usize,
    },
    LogAbsDet {
        input: usize,
        inv_t: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records one differentiable computation. Dropping the tape frees every
/// intermediate value.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    leaves: RefCell<HashMap<TensorId, usize>>,
    no_grad: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to grad-tracked leaves.
#[derive(Debug, Default)]
pub struct Gradients<T: Real> {
    grads: HashMap<TensorId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&leaf.id())
    }

    /// Gradient for `leaf`, or zeros when the leaf never reached the tape.
    pub fn get_or_zeros(&self, leaf: &Tensor<T>) -> Tensor<T> {
        self.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Shape relation for trailing-singleton broadcasting: `small` equals `big`
/// on a leading prefix and is 1 on the rest. Returns the size of the
/// broadcast trailing block.
fn trailing_broadcast(big: &[usize], small: &[usize]) -> Option<usize> {
    if big.len() != small.len() {
        return None;
    }
    let k = big.iter().zip(small).take_while(|(a, b)| a == b).count();
    small[k..].iter().all(|&d| d == 1).then(|| big[k..].iter().product())
}

/// For each flat index of `shape`, the flat index obtained with `strides`.
fn index_map(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        out.push(pos);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += strides[d];
            if counter[d] < shape[d] {
                break;
            }
            pos -= strides[d] * shape[d];
            counter[d] = 0;
        }
    }
    out
}

/// Output shape and, per input element, the output slot for a keep-dims
/// reduction over `axes`.
fn reduction_layout(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis { axis: a, rank });
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let first = reduced.iter().position(|&r| r).unwrap_or(rank);
    let map = if reduced[first..].iter().all(|&r| r) {
        let inner: usize = shape[first..].iter().product();
        (0..shape.iter().product::<usize>()).map(|i| i / inner).collect()
    } else {
        let os = strides(&out_shape);
        let zs: Vec<usize> = os.iter().zip(&reduced).map(|(&s, &r)| if r { 0 } else { s }).collect();
        index_map(shape, &zs)
    };
    Ok((out_shape, map))
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn sum_chunks<T: Real>(g: &[T], inner: usize) -> Vec<T> {
    g.chunks(inner).map(|c| c.iter().copied().sum()).collect()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
            no_grad: false,
        }
    }

    /// A tape that treats every leaf as a constant: nothing is recorded for
    /// the reverse pass.
    pub fn inference() -> Self {
        Tape {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a leaf. Grad-tracked tensors are deduplicated by
    /// identity, so a parameter used in several places accumulates one
    /// gradient.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        if self.no_grad || !t.requires_grad() {
            return self.constant(t.clone());
        }
        if let Some(&idx) = self.leaves.borrow().get(&t.id()) {
            return Var { tape: self, idx };
        }
        let v = self.push(t.clone(), Op::Leaf(t.id()), true);
        self.leaves.borrow_mut().insert(t.id(), v.idx);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Constant, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let op = if tracked { op } else { Op::Constant };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value(&self, idx: usize) -> Tensor<T> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn tracked(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].tracked
    }

    /// Reverse pass from a single-element result.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.idx].value.shape().to_vec();
        if nodes[root.idx].value.numel() != 1 {
            return Err(Error::NotScalar(root_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.idx).map(|_| None).collect();
        grads[root.idx] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=root.idx).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let val = |j: usize| nodes[j].value.data();
            let tr = |j: usize| nodes[j].tracked;
            let mut send = |j: usize, gj: Vec<T>| {
                if nodes[j].tracked {
                    accumulate(&mut grads[j], gj);
                }
            };
            match &node.op {
                Op::Leaf(id) => {
                    out.grads
                        .insert(*id, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Constant => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg_b = matches!(node.op, Op::Sub(..));
                    let (a, b) = (*a, *b);
                    for (j, negate) in [(a, false), (b, neg_b)] {
                        if !tr(j) {
                            continue;
                        }
                        let mut gj = if nodes[j].value.numel() == g.len() {
                            g.clone()
                        } else {
                            sum_chunks(&g, g.len() / nodes[j].value.numel())
                        };
                        if negate {
                            gj.iter_mut().for_each(|v| *v = -*v);
                        }
                        send(j, gj);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for (j, k) in [(a, b), (b, a)] {
                        if !tr(j) {
                            continue;
                        }
                        let (xj, xk) = (val(j), val(k));
                        let gj = if xj.len() == g.len() && xk.len() == g.len() {
                            g.iter().zip(xk).map(|(&g, &x)| g * x).collect()
                        } else if xj.len() == g.len() {
                            let inner = g.len() / xk.len();
                            g.iter().enumerate().map(|(i, &g)| g * xk[i / inner]).collect()
                        } else {
                            let inner = g.len() / xj.len();
                            let prod: Vec<T> = g.iter().zip(xk).map(|(&g, &x)| g * x).collect();
                            sum_chunks(&prod, inner)
                        };
                        send(j, gj);
                    }
                }
                Op::Neg(a) => send(*a, g.iter().map(|&v| -v).collect()),
                Op::Scale(a, c) => send(*a, g.iter().map(|&v| v * *c).collect()),
                Op::Offset(a) => send(*a, g),
                Op::Exp(a) => {
                    let y = node.value.data();
                    send(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect())
                }
                Op::Log(a) => {
                    let x = val(*a);
                    send(*a, g.iter().zip(x).map(|(&g, &x)| g / x).collect())
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    send(*a, g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect())
                }
                Op::Softplus(a) => {
                    let x = val(*a);
                    send(
                        *a,
                        g.iter().zip(x).map(|(&g, &x)| g / (T::one() + (-x).exp())).collect(),
                    )
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                    let n = nodes[b].value.shape()[1];
                    if tr(a) {
                        // dA[m×k] = G[m×n] · Bᵀ
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g,
                            n as isize,
                            1,
                            val(b),
                            1,
                            n as isize,
                            T::zero(),
                            &mut da,
                            k as isize,
                            1,
                        );
                        send(a, da);
                    }
                    if tr(b) {
                        // dB[k×n] = Aᵀ · G
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            val(a),
                            1,
                            k as isize,
                            &g,
                            n as isize,
                            1,
                            T::zero(),
                            &mut db,
                            n as isize,
                            1,
                        );
                        send(b, db);
                    }
                }
                Op::Conv2d { input, kernel, geom } => {
                    let (input, kernel) = (*input, *kernel);
                    let n = nodes[input].value.shape()[0];
                    let (dx, dk) =
                        kernels::conv2d_backward(geom, n, val(input), val(kernel), &g, tr(input), tr(kernel));
                    if let Some(dx) = dx {
                        send(input, dx);
                    }
                    if let Some(dk) = dk {
                        send(kernel, dk);
                    }
                }
                Op::AddBias { input, bias, inner } => {
                    let (input, bias, inner) = (*input, *bias, *inner);
                    if tr(bias) {
                        let size = nodes[bias].value.numel();
                        let mut gb = vec![T::zero(); size];
                        for (i, chunk) in g.chunks(inner).enumerate() {
                            let s: T = chunk.iter().copied().sum();
                            gb[i % size] = gb[i % size] + s;
                        }
                        send(bias, gb);
                    }
                    send(input, g);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let shape = nodes[a].value.shape().to_vec();
                    let axes = reduced_axes(&shape, node.value.shape());
                    let (_, map) = reduction_layout(&shape, &axes).expect("recorded layout");
                    send(a, map.iter().map(|&o| g[o]).collect());
                }
                Op::Max { input, argmax } => {
                    let mut gi = vec![T::zero(); nodes[*input].value.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] = gi[src] + g[o];
                    }
                    send(*input, gi);
                }
                Op::LogSumExp(a) => {
                    let a = *a;
                    let shape = nodes[a].value.shape().to_vec();
                    let axes = reduced_axes(&shape, node.value.shape());
                    let (_, map) = reduction_layout(&shape, &axes).expect("recorded layout");
                    let x = val(a);
                    let y = node.value.data();
                    send(
                        a,
                        map.iter()
                            .enumerate()
                            .map(|(i, &o)| g[o] * (x[i] - y[o]).exp())
                            .collect(),
                    );
                }
                Op::Reshape(a) => send(*a, g),
                Op::Transpose { input, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    let out_shape = node.value.shape().to_vec();
                    send(*input, permute(&g, &out_shape, &inv));
                }
                Op::Slice { input, axis, start } => {
                    let in_shape = nodes[*input].value.shape();
                    let out_shape = node.value.shape();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let (span_in, span_out) = (in_shape[*axis] * inner, out_shape[*axis] * inner);
                    let mut gi = vec![T::zero(); nodes[*input].value.numel()];
                    for o in 0..outer {
                        let dst = o * span_in + start * inner;
                        gi[dst..dst + span_out].copy_from_slice(&g[o * span_out..(o + 1) * span_out]);
                    }
                    send(*input, gi);
                }
                Op::Expand(a) => {
                    let a = *a;
                    let small = nodes[a].value.shape().to_vec();
                    let zs = expand_strides(&small, node.value.shape());
                    let map = index_map(node.value.shape(), &zs);
                    let mut ga = vec![T::zero(); nodes[a].value.numel()];
                    for (i, &src) in map.iter().enumerate() {
                        ga[src] = ga[src] + g[i];
                    }
                    send(a, ga);
                }
                Op::MaskedMerge { mask, on, off } => {
                    let (on, off) = (*on, *off);
                    if tr(on) {
                        send(on, g.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect());
                    }
                    if tr(off) {
                        send(
                            off,
                            g.iter().zip(mask.iter()).map(|(&g, &m)| g * (T::one() - m)).collect(),
                        );
                    }
                }
                Op::LogAbsDet { input, inv_t } => {
                    send(*input, inv_t.iter().map(|&v| v * g[0]).collect());
                }
            }
        }

        // Tracked leaves that the root never reached get explicit zeros.
        for (&id, &idx) in self.leaves.borrow().iter() {
            if idx <= root.idx {
                out.grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(nodes[idx].value.shape()));
            } else {
                out.grads.insert(id, Tensor::zeros(nodes[idx].value.shape()));
            }
        }
        Ok(out)
    }
}

fn reduced_axes(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    in_shape
        .iter()
        .zip(out_shape)
        .enumerate()
        .filter(|(_, (&i, &o))| o == 1 && i != 1)
        .map(|(a, _)| a)
        .collect()
}

fn expand_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    strides(small)
        .iter()
        .zip(small.iter().zip(big))
        .map(|(&s, (&a, &b))| if a == b { s } else { 0 })
        .collect()
}

fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let pstrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    index_map(&out_shape, &pstrides).into_iter().map(|i| data[i]).collect()
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.numel()
    }

    fn tracked(&self) -> bool {
        self.tape.tracked(self.idx)
    }

    fn check_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let x = self.value();
        let y = x.data().iter().map(|&v| f(v)).collect();
        self.tape
            .push(Tensor::from_parts(x.shape().to_vec(), y), op, self.tracked())
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (xa, xb) = (a.data(), b.data());
        let (shape, out): (Vec<usize>, Vec<T>) = if a.shape() == b.shape() {
            (a.shape().to_vec(), xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect())
        } else if let Some(inner) = trailing_broadcast(a.shape(), b.shape()) {
            (
                a.shape().to_vec(),
                xa.iter().enumerate().map(|(i, &p)| f(p, xb[i / inner])).collect(),
            )
        } else if let Some(inner) = trailing_broadcast(b.shape(), a.shape()) {
            (
                b.shape().to_vec(),
                xb.iter().enumerate().map(|(i, &q)| f(xa[i / inner], q)).collect(),
            )
        } else {
            return Err(Error::shape(format!(
                "incompatible shapes {:?} and {:?} (only trailing singleton dims broadcast)",
                a.shape(),
                b.shape()
            )));
        };
        let tracked = self.tracked() || other.tracked();
        Ok(self.tape.push(Tensor::from_parts(shape, out), op, tracked))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.idx, other.idx))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.idx, other.idx))
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|v| -v, Op::Neg(self.idx))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(|v| v * c, Op::Scale(self.idx, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(|v| v + c, Op::Offset(self.idx))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|v| v.exp(), Op::Exp(self.idx))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(|v| v.ln(), Op::Log(self.idx)))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|v| v.tanh(), Op::Tanh(self.idx))
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(), Op::Softplus(self.idx))
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!(
                "matmul needs [m,k]·[k,n], got {:?}·{:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        kernels::matmul_into(a.data(), b.data(), &mut c, m, k, n);
        let tracked = self.tracked() || other.tracked();
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul(self.idx, other.idx),
            tracked,
        ))
    }

    /// Stride-1 cross-correlation of N×C×H×W input with O×C×k×k kernels.
    pub fn conv2d(self, kernels: Var<'t, T>, padding: Padding) -> Result<Var<'t, T>> {
        self.check_tape(&kernels);
        let (x, k) = (self.value(), kernels.value());
        let geom = kernels::conv_geom(x.shape(), k.shape(), padding == Padding::Same).map_err(Error::Shape)?;
        let n = x.shape()[0];
        let y = kernels::conv2d_forward(&geom, n, x.data(), k.data());
        let tracked = self.tracked() || kernels.tracked();
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, geom.o, geom.ho, geom.wo], y),
            Op::Conv2d {
                input: self.idx,
                kernel: kernels.idx,
                geom,
            },
            tracked,
        ))
    }

    /// Adds a rank-1 `bias` along `axis` (e.g. channel bias for N×C×H×W).
    pub fn add_bias(self, bias: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        self.check_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        if axis >= x.rank() {
            return Err(Error::InvalidAxis { axis, rank: x.rank() });
        }
        if b.rank() != 1 || b.numel() != x.shape()[axis] {
            return Err(Error::shape(format!(
                "bias of shape {:?} does not match axis {axis} of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let size = b.numel();
        let bd = b.data();
        let y = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % size])
            .collect();
        let tracked = self.tracked() || bias.tracked();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::AddBias {
                input: self.idx,
                bias: bias.idx,
                inner,
            },
            tracked,
        ))
    }

    /// Sum over `axes`, keeping reduced dimensions as size 1.
    pub fn sum(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (out_shape, map) = reduction_layout(x.shape(), axes)?;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&v, &o) in x.data().iter().zip(&map) {
            out[o] = out[o] + v;
        }
        Ok(self
            .tape
            .push(Tensor::from_parts(out_shape, out), Op::Sum(self.idx), self.tracked()))
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        let s = self.sum(&axes).expect("valid axes");
        s.reshape(&[1]).expect("single element")
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.numel();
        self.sum_all().scale(T::one() / T::c(n as f64))
    }

    pub fn max(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (out_shape, map) = reduction_layout(x.shape(), axes)?;
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![T::neg_infinity(); n_out];
        let mut argmax = vec![0usize; n_out];
        for (i, (&v, &o)) in x.data().iter().zip(&map).enumerate() {
            if v > out[o] {
                out[o] = v;
                argmax[o] = i;
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, out),
            Op::Max {
                input: self.idx,
                argmax,
            },
            self.tracked(),
        ))
    }

    /// Numerically stable log-sum-exp over `axes` (max subtracted first).
    pub fn logsumexp(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (out_shape, map) = reduction_layout(x.shape(), axes)?;
        let n_out: usize = out_shape.iter().product();
        let mut m = vec![T::neg_infinity(); n_out];
        for (&v, &o) in x.data().iter().zip(&map) {
            if v > m[o] {
                m[o] = v;
            }
        }
        let mut s = vec![T::zero(); n_out];
        for (&v, &o) in x.data().iter().zip(&map) {
            s[o] = s[o] + (v - m[o]).exp();
        }
        let out = m
            .iter()
            .zip(&s)
            .map(|(&m, &s)| if m.is_infinite() { m } else { m + s.ln() })
            .collect();
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, out),
            Op::LogSumExp(self.idx),
            self.tracked(),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = x.reshaped(shape)?;
        Ok(self.tape.push(y, Op::Reshape(self.idx), self.tracked()))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn transpose(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("{perm:?} is not a permutation of {rank} axes")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let y = permute(x.data(), x.shape(), perm);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, y),
            Op::Transpose {
                input: self.idx,
                perm: perm.to_vec(),
            },
            self.tracked(),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::InvalidAxis { axis, rank: x.rank() });
        }
        if start >= end || end > x.shape()[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{end} out of bounds for axis {axis} of {:?}",
                x.shape()
            )));
        }
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let outer: usize = x.shape()[..axis].iter().product();
        let span = x.shape()[axis] * inner;
        let mut y = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            y.extend_from_slice(&x.data()[o * span + start * inner..o * span + end * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = end - start;
        Ok(self.tape.push(
            Tensor::from_parts(shape, y),
            Op::Slice {
                input: self.idx,
                axis,
                start,
            },
            self.tracked(),
        ))
    }

    /// Repeats size-1 dimensions up to `shape` (same rank).
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != shape.len() || x.shape().iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::shape(format!("cannot expand {:?} to {shape:?}", x.shape())));
        }
        let zs = expand_strides(x.shape(), shape);
        let y = index_map(shape, &zs).into_iter().map(|i| x.data()[i]).collect();
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), y),
            Op::Expand(self.idx),
            self.tracked(),
        ))
    }

    /// `mask ⊙ on + (1 − mask) ⊙ off` for a constant binary mask.
    pub fn masked_merge(mask: &Tensor<T>, on: Var<'t, T>, off: Var<'t, T>) -> Result<Var<'t, T>> {
        on.check_tape(&off);
        let (a, b) = (on.value(), off.value());
        if a.shape() != b.shape() || mask.shape() != a.shape() {
            return Err(Error::shape(format!(
                "masked merge needs identical shapes, got mask {:?}, {:?}, {:?}",
                mask.shape(),
                a.shape(),
                b.shape()
            )));
        }
        let m = mask.data();
        let y = a
            .data()
            .iter()
            .zip(b.data())
            .zip(m)
            .map(|((&p, &q), &m)| m * p + (T::one() - m) * q)
            .collect();
        let tracked = on.tracked() || off.tracked();
        Ok(on.tape.push(
            Tensor::from_parts(a.shape().to_vec(), y),
            Op::MaskedMerge {
                mask: Arc::new(m.to_vec()),
                on: on.idx,
                off: off.idx,
            },
            tracked,
        ))
    }

    /// `log|det W|` of a square matrix; gradient `W⁻ᵀ`.
    pub fn log_abs_det(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != x.shape()[1] {
            return Err(Error::shape(format!(
                "log_abs_det needs a square matrix, got {:?}",
                x.shape()
            )));
        }
        let c = x.shape()[0];
        let m = DMatrix::from_row_iterator(c, c, x.data().iter().map(|v| v.f64()));
        let det = m.clone().lu().determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Singular(f64::INFINITY));
        }
        let inv = m.try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
        // Row-major W⁻ᵀ: element (i, j) is inv[(j, i)].
        let mut inv_t = Vec::with_capacity(c * c);
        for i in 0..c {
            for j in 0..c {
                inv_t.push(T::c(inv[(j, i)]));
            }
        }
        Ok(self.tape.push(
            Tensor::scalar(T::c(det.abs().ln())),
            Op::LogAbsDet { input: self.idx, inv_t },
            self.tracked(),
        ))
    }
}
