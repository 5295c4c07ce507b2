use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Marker for "no source element" in a gather index; the output is zero there.
pub const GATHER_ZERO: usize = usize::MAX;

/// A differentiable op defined outside this module.
///
/// `backward` receives the op's input values, its output value, and the
/// gradient flowing into the output; it returns one optional gradient per
/// input, each shaped like that input.
pub trait Function<T: Real> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Tensor<T>>),
    Scale(usize, T),
    Offset(usize),
    Sigmoid(usize),
    Silu(usize),
    ReluSquared(usize),
    Exp(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Gather { input: usize, index: Rc<[usize]> },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: T },
    Conv3x3 { x: usize, w: usize, b: usize },
    Sum(usize),
    Mean(usize),
    Custom { inputs: Vec<usize>, f: Box<dyn Function<T>> },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed ops. Rebuilt for every forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward traversal, indexed by tape position.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums a full-size gradient back down to a broadcast operand of `n` elements.
fn reduce_broadcast<T: Real>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Shape bookkeeping for an axis-wise structural op: `(outer, axis_len, inner)`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            let r = |i: usize| nodes[i].requires_grad;
            match &op {
                Op::Leaf => false,
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => r(*a) || r(*b),
                Op::MulConst(a, _)
                | Op::Scale(a, _)
                | Op::Offset(a)
                | Op::Sigmoid(a)
                | Op::Silu(a)
                | Op::ReluSquared(a)
                | Op::Exp(a)
                | Op::Transpose(a)
                | Op::Reshape(a)
                | Op::Sum(a)
                | Op::Mean(a) => r(*a),
                Op::Slice { input, .. } | Op::Gather { input, .. } => r(*input),
                Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => {
                    inputs.iter().any(|&i| r(i))
                }
                Op::LayerNorm { x, gamma, beta, .. } => r(*x) || r(*gamma) || r(*beta),
                Op::Conv3x3 { x, w, b } => r(*x) || r(*w) || r(*b),
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Records a user-defined op whose forward value was computed by the caller.
    pub fn apply(
        &self,
        f: Box<dyn Function<T>>,
        inputs: &[Var<'_, T>],
        output: Tensor<T>,
    ) -> Result<Var<'_, T>> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let name = f.name();
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                f,
            },
        )
    }

    fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::shape("tape", "variable belongs to a different tape"))
        }
    }

    /// Reverse traversal from a scalar loss. Each record is visited once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(&loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Err(Error::DisconnectedGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        let acc = |grads: &mut Vec<Option<Vec<T>>>, id: usize, g: Vec<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(g) {
                        *e = *e + v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *b, reduce_broadcast(&g, val(*b).numel()));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    acc(&mut grads, *b, reduce_broadcast(&neg, val(*b).numel()));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let nb = bv.len();
                    if nodes[*a].requires_grad {
                        let ga = g.iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect();
                        acc(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let full: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *b, reduce_broadcast(&full, nb));
                    }
                }
                Op::MulConst(a, c) => {
                    let cv = c.data();
                    let n = cv.len();
                    let ga = g.iter().enumerate().map(|(i, &x)| x * cv[i % n]).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.iter().map(|&x| x * *s).collect()),
                Op::Offset(a) | Op::Reshape(a) => acc(&mut grads, *a, g.clone()),
                Op::Sigmoid(a) => {
                    let ga = g
                        .iter()
                        .zip(out.data())
                        .map(|(&x, &s)| x * s * (T::one() - s))
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let ga = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &z)| {
                            let s = sigmoid(z);
                            x * s * (T::one() + z * (T::one() - s))
                        })
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::ReluSquared(a) => {
                    let two = T::one() + T::one();
                    let ga = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &z)| x * two * z.max(T::zero()))
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(out.data()).map(|(&x, &e)| x * e).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (at, bt) = (val(*a), val(*b));
                    let k = bt.shape()[0];
                    let p = bt.shape()[1];
                    let rows = at.numel() / k;
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, kernels::matmul_grad_a(&g, bt.data(), rows, k, p));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, kernels::matmul_grad_b(&g, at.data(), rows, k, p));
                    }
                }
                Op::Transpose(a) => {
                    let s = out.shape();
                    let ga = transpose_last2(&g, s);
                    acc(&mut grads, *a, ga);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = split_dims(out.shape(), *axis);
                    let total = out.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &i in inputs {
                        let len = val(i).shape()[*axis] * inner;
                        if nodes[i].requires_grad {
                            let mut gi = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                let base = o * total + offset;
                                gi.extend_from_slice(&g[base..base + len]);
                            }
                            acc(&mut grads, i, gi);
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let src = val(*input);
                    let (outer, alen, inner) = split_dims(src.shape(), *axis);
                    let len = out.shape()[*axis] * inner;
                    let mut gi = vec![T::zero(); src.numel()];
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        gi[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    acc(&mut grads, *input, gi);
                }
                Op::Gather { input, index } => {
                    let mut gi = vec![T::zero(); val(*input).numel()];
                    for (&src, &x) in index.iter().zip(&g) {
                        if src != GATHER_ZERO {
                            gi[src] = gi[src] + x;
                        }
                    }
                    acc(&mut grads, *input, gi);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(val(*x).data(), val(*gamma).data(), *eps, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Conv3x3 { x, w, b } => {
                    let (xt, wt) = (val(*x), val(*w));
                    let s = xt.shape();
                    let dims = ConvDims {
                        batch: s[0],
                        c_in: s[1],
                        c_out: wt.shape()[0],
                        h: s[2],
                        w: s[3],
                    };
                    let (dx, dw, db) = kernels::conv3x3_backward(xt.data(), wt.data(), &g, dims);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    let s = g[0] / T::from_usize(n).unwrap();
                    acc(&mut grads, *a, vec![s; n]);
                }
                Op::Custom { inputs, f } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i).as_ref()).collect();
                    let gt = Tensor::from_parts(out.shape().to_vec(), g);
                    let gs = f.backward(&ins, out, &gt);
                    debug_assert_eq!(gs.len(), inputs.len());
                    for (&i, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            debug_assert_eq!(gi.len(), val(i).numel());
                            acc(&mut grads, i, gi);
                        }
                    }
                    continue;
                }
            }
            // The gradient buffer of an interior node is no longer needed, but
            // leaves keep theirs for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn transpose_last2<T: Real>(data: &[T], shape: &[usize]) -> Vec<T> {
    // `shape` is the shape of `data` viewed as [.., m, n]; result is [.., n, m].
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![T::zero(); data.len()];
    for (bi, block) in data.chunks_exact(m * n).enumerate() {
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = block[i * n + j];
            }
        }
    }
    out
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Self) -> Result<()> {
        self.tape.check_owner(other)
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Self> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if !is_suffix(a.shape(), b.shape()) {
            return Err(Error::shape(
                name,
                format!("{:?} does not broadcast into {:?}", b.shape(), a.shape()),
            ));
        }
        let bd = b.data();
        let nb = bd.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.tape.push(name, out, op(self.id, other.id))
    }

    /// Elementwise sum. `other` may broadcast over leading dims of `self`.
    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    /// Hadamard product. `other` may broadcast over leading dims of `self`.
    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    /// Product with a tensor that is excluded from differentiation.
    pub fn mul_const(self, c: Tensor<T>) -> Result<Self> {
        let a = self.value();
        if !is_suffix(a.shape(), c.shape()) {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} does not broadcast into {:?}", c.shape(), a.shape()),
            ));
        }
        let cd = c.data();
        let n = cd.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * cd[i % n])
            .collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.tape.push("mul_const", out, Op::MulConst(self.id, Rc::new(c)))
    }

    fn unary(self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Self> {
        let out = self.value().map(f);
        self.tape.push(name, out, op)
    }

    pub fn scale(self, s: T) -> Result<Self> {
        self.unary("scale", |x| x * s, Op::Scale(self.id, s))
    }

    /// Adds a scalar constant.
    pub fn offset(self, c: T) -> Result<Self> {
        self.unary("offset", |x| x + c, Op::Offset(self.id))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-T::one())
    }

    /// `1 - self`
    pub fn one_minus(self) -> Result<Self> {
        self.neg()?.offset(T::one())
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Result<Self> {
        self.unary("silu", |x| x * sigmoid(x), Op::Silu(self.id))
    }

    /// `max(x, 0)^2`
    pub fn relu_squared(self) -> Result<Self> {
        self.unary(
            "relu_squared",
            |x| {
                let r = x.max(T::zero());
                r * r
            },
            Op::ReluSquared(self.id),
        )
    }

    /// Raw exponential. Overflow is reported as `NonFinite`.
    pub fn exp(self) -> Result<Self> {
        self.unary("exp", |x| x.exp(), Op::Exp(self.id))
    }

    /// `[.., M, K] x [K, P] -> [.., M, P]`
    pub fn matmul(self, rhs: Self) -> Result<Self> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if b.rank() != 2 {
            return Err(Error::shape("matmul", format!("rhs must be 2-D, got {:?}", b.shape())));
        }
        let (k, p) = (b.shape()[0], b.shape()[1]);
        if a.last_dim() != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let rows = a.numel() / k;
        let data = kernels::matmul(a.data(), b.data(), rows, k, p);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let out = Tensor::from_parts(shape, data);
        self.tape.push("matmul", out, Op::MatMul(self.id, rhs.id))
    }

    /// Swaps the last two dims.
    pub fn transpose(self) -> Result<Self> {
        let a = self.value();
        if a.rank() < 2 {
            return Err(Error::shape("transpose", "need rank >= 2"));
        }
        let data = transpose_last2(a.data(), a.shape());
        let mut shape = a.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        self.tape
            .push("transpose", Tensor::from_parts(shape, data), Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(p)?;
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
        }
        let (outer, _, inner) = split_dims(base, axis);
        let total_axis: usize = vals.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total_axis;
        first.tape.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let a = self.value();
        if axis >= a.rank() || len == 0 || start + len > a.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
            ));
        }
        let (outer, alen, inner) = split_dims(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        )
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("split", format!("axis {axis} out of range")));
        }
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.contains(&0) {
            return Err(Error::SplitSizeMismatch {
                sizes: sizes.to_vec(),
                len: shape[axis],
            });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let s = self.slice(axis, start, len);
                start += len;
                s
            })
            .collect()
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(self, shape: &[usize], index: Rc<[usize]>) -> Result<Self> {
        let a = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", "index length does not match output shape"));
        }
        let src = a.data();
        let mut data = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(T::zero());
            } else if i < src.len() {
                data.push(src[i]);
            } else {
                return Err(Error::shape("gather", format!("index {i} out of bounds")));
            }
        }
        self.tape.push(
            "gather",
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather {
                input: self.id,
                index,
            },
        )
    }

    /// Normalizes over the last dim, then applies `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: T) -> Result<Self> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let d = x.last_dim();
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?}, beta {:?} for feature dim {d}", g.shape(), b.shape()),
            ));
        }
        if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::BadParam("layer_norm eps must be positive".into()));
        }
        let data = kernels::layer_norm(x.data(), g.data(), b.data(), eps);
        self.tape.push(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        )
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.
    pub fn conv3x3(self, weight: Self, bias: Self) -> Result<Self> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape("conv3x3", format!("x {xs:?}, w {ws:?}")));
        }
        if ws[1] != xs[1] || b.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv3x3",
                format!("channels: x {xs:?}, w {ws:?}, b {:?}", b.shape()),
            ));
        }
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
        };
        let data = kernels::conv3x3(x.data(), w.data(), b.data(), dims);
        let shape = vec![xs[0], ws[0], xs[2], xs[3]];
        self.tape.push(
            "conv3x3",
            Tensor::from_parts(shape, data),
            Op::Conv3x3 {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
        )
    }

    pub fn sum(self) -> Result<Self> {
        let s = self.value().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let s = self.value().mean();
        self.tape.push("mean", Tensor::scalar(s), Op::Mean(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_sum() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 2]));
        assert!(matches!(a.matmul(b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_rejects_non_finite() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[f64::NAN, 1.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert!(matches!(a.matmul(b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(a.exp(), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::ones(&[4]));
        let y = x.layer_norm(g, b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[0.0, 2.0]));
        let y = x.layer_norm(g, b, 1e-300).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);

        let bad = tape.constant(Tensor::ones(&[3]));
        assert!(x.layer_norm(bad, b, 1e-5).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().unwrap().value().data(), &[0.5]);
        let k = tape.constant(t(&[2], &[-1.0, 2.0]));
        assert_eq!(k.relu_squared().unwrap().value().data(), &[0.0, 4.0]);
    }

    #[test]
    fn concat_split_round_trip_is_exact() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
        let z = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).cos()));
        let cat = Var::concat(&[x, z], 1).unwrap();
        assert_eq!(cat.shape(), vec![2, 6, 4]);
        let parts = cat.split(1, &[3, 3]).unwrap();
        assert_eq!(*parts[0].value(), *x.value());
        assert_eq!(*parts[1].value(), *z.value());
        assert!(matches!(
            cat.split(1, &[3, 2]),
            Err(Error::SplitSizeMismatch { .. })
        ));
    }

    #[test]
    fn transpose_is_involution() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| i as f64));
        let tt = x.transpose().unwrap().transpose().unwrap();
        assert_eq!(*tt.value(), *x.value());
        assert_eq!(x.transpose().unwrap().shape(), vec![2, 5, 3]);
    }

    #[test]
    fn conv_identity_kernel_and_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.5 - 2.0));
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv3x3(w, b).unwrap();
        assert_eq!(*y.value(), *x.value());

        let zero = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let w = tape.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64));
        let b = tape.constant(t(&[2], &[0.25, -1.5]));
        let y = zero.conv3x3(w, b).unwrap();
        let v = y.value();
        for (plane, chunk) in v.data().chunks(9).enumerate() {
            let expect = if plane % 2 == 0 { 0.25 } else { -1.5 };
            assert!(chunk.iter().all(|&q| q == expect));
        }
    }

    #[test]
    fn backward_simple_cases() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[0.3, -2.0, 5.0]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar { .. })));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(c.sum().unwrap()),
            Err(Error::DisconnectedGraph)
        ));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0, 5.0, 4.0, 6.0, 8.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert!(x.add(tape.var(Tensor::zeros(&[2]))).is_err());
    }
}
