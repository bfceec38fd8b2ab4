//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during the
//! forward pass. [`Tape::backward`] walks the record once in reverse and
//! returns a [`Gradients`] table indexed by variable.
//!
//! ```
//! use mcoe::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64([2], &[1.0, -2.0]).unwrap());
//! let y = x.mul(x).unwrap().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```
//!
//! Model-specific primitives (the selective scan, for instance) plug in
//! through the [`Primitive`] trait.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::{self, Conv2dSpec, ConvMode, Tensor};

/// A differentiable operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient per input (`None` when the
/// input has no gradient contribution).
pub trait Primitive<T: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Sigmoid(usize),
    Silu(usize),
    Softplus(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(T, T)>,
    },
    Conv1d {
        x: usize,
        kernel: usize,
        mode: ConvMode,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        spec: Conv2dSpec,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    Rows {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    UnfoldRows {
        x: usize,
        kernel: usize,
        left_pad: usize,
    },
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        prim: Box<dyn Primitive<T>>,
    },
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only operation record for one forward pass.
///
/// A tape is single-threaded and may be reversed exactly once.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; gradients are kept when `value.requires_grad()`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(value, op, needs)
    }

    /// Registers an externally defined primitive whose forward value has
    /// already been computed from `inputs`.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        output: Tensor<T>,
        prim: Box<dyn Primitive<T>>,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.record(
            output,
            Op::Custom {
                inputs: ids.clone(),
                prim,
            },
            &ids,
        )
    }

    /// Reverse pass from a scalar output. Consumes the tape's record.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::contract("tape has already been reversed"));
        }
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(
            nodes[output.id].value.shape().to_vec(),
            T::one(),
        ));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = backward_op(&nodes, node, &g);
            for (input, gi) in contributions {
                if !nodes[input].needs_grad {
                    continue;
                }
                accumulate(&mut grads[input], gi);
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradients of a scalar output with respect to every leaf that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.iter().product::<usize>() == 1 || lhs.ends_with(rhs)
}

fn binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if !broadcastable(a.shape(), b.shape()) {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let nb = b.len();
    let bd = b.data();
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect(),
    )
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let n = out.len();
    let o = out.data_mut();
    for (i, &v) in g.data().iter().enumerate() {
        o[i % n] = o[i % n] + v;
    }
    out
}

fn rows_cols(t: &Tensor<impl Scalar>) -> (usize, usize) {
    let n = t.last_dim();
    (t.len() / n.max(1), n)
}

// shape checks make these fallible, so they cannot be the operator traits
#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
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

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.record(value, op, &[self.id])
    }

    /// Elementwise sum; `other` may broadcast as a trailing-axes suffix or a scalar.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = binary(&self.value(), &other.value(), "add", |a, b| a + b)?;
        Ok(self
            .tape
            .record(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = binary(&self.value(), &other.value(), "sub", |a, b| a - b)?;
        Ok(self
            .tape
            .record(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = binary(&self.value(), &other.value(), "mul", |a, b| a * b)?;
        Ok(self
            .tape
            .record(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Shift(self.id))
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let v = tensor::matmul(&a, &b)?;
        Ok(self
            .tape
            .record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("transpose", a.shape(), &[]));
        }
        let v = a.transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn exp(self) -> Var<'t, T> {
        let v = self.value().map(T::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().sigmoid();
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'t, T> {
        let v = self.value().silu();
        self.unary(v, Op::Silu(self.id))
    }

    pub fn softplus(self) -> Var<'t, T> {
        let v = self.value().softplus();
        self.unary(v, Op::Softplus(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        let x = self.value();
        let v = tensor::softmax(&x, x.rank().saturating_sub(1)).expect("last axis exists");
        self.unary(v, Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Var<'t, T> {
        let v = tensor::log_softmax(&self.value());
        self.unary(v, Op::LogSoftmax(self.id))
    }

    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let n = x.last_dim();
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::shape("layer_norm", x.shape(), g.shape()));
        }
        let (v, stats) = tensor::layer_norm_stats(&x, &g, &b);
        Ok(self.tape.record(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                stats,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Depthwise convolution along the first axis of an `[M, E]` sequence.
    pub fn conv1d(self, kernel: Var<'t, T>, mode: ConvMode) -> Result<Var<'t, T>> {
        let v = tensor::conv1d(&self.value(), &kernel.value(), mode)?;
        Ok(self.tape.record(
            v,
            Op::Conv1d {
                x: self.id,
                kernel: kernel.id,
                mode,
            },
            &[self.id, kernel.id],
        ))
    }

    pub fn conv2d(self, kernel: Var<'t, T>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        let v = tensor::conv2d(&self.value(), &kernel.value(), spec)?;
        Ok(self.tape.record(
            v,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
                spec,
            },
            &[self.id, kernel.id],
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Mean over the first axis of a rank-2 tensor: `[M, E] -> [E]`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] == 0 {
            return Err(Error::shape("mean_rows", x.shape(), &[]));
        }
        let (m, e) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); e];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(x.row(r)) {
                *o = *o + v;
            }
        }
        let mf = T::from_usize_lossy(m);
        out.iter_mut().for_each(|o| *o = *o / mf);
        Ok(self.unary(Tensor::new(vec![e], out)?, Op::MeanRows(self.id)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?.with_grad(false);
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || start + len > x.shape()[1] {
            return Err(Error::shape("slice_cols", x.shape(), &[start, len]));
        }
        let m = x.shape()[0];
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.unary(
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x: self.id, start },
        ))
    }

    /// Rows `[start, start + count)` of a rank-2 tensor.
    pub fn rows(self, start: usize, count: usize) -> Result<Var<'t, T>> {
        let v = self.value().rows(start, count)?;
        Ok(self.unary(v, Op::Rows { x: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of an empty list"))?;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let m = vals[0].shape()[0];
        for v in &vals {
            if v.rank() != 2 || v.shape()[0] != m {
                return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
            }
        }
        let n: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.record(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatCols(ids.clone()),
            &ids,
        ))
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of an empty list"))?;
        let vals: Vec<Tensor<T>> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let v = Tensor::concat_rows(&vals)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.record(v, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Im2col along the first axis: `[M, E] -> [M, K*E]`, where block `j`
    /// of row `t` holds row `t + j - left_pad` (zero outside the sequence).
    pub fn unfold_rows(self, kernel: usize, left_pad: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || kernel == 0 {
            return Err(Error::shape("unfold_rows", x.shape(), &[kernel]));
        }
        let (m, e) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); m * kernel * e];
        for t in 0..m {
            for j in 0..kernel {
                let src = t as isize + j as isize - left_pad as isize;
                if src < 0 || src >= m as isize {
                    continue;
                }
                let dst = t * kernel * e + j * e;
                out[dst..dst + e].copy_from_slice(x.row(src as usize));
            }
        }
        Ok(self.unary(
            Tensor::new(vec![m, kernel * e], out)?,
            Op::UnfoldRows {
                x: self.id,
                kernel,
                left_pad,
            },
        ))
    }

    /// Selects entries of a rank-1 tensor.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 1 || indices.iter().any(|&i| i >= x.len()) {
            return Err(Error::shape("gather", x.shape(), indices));
        }
        let out = indices.iter().map(|&i| x.data()[i]).collect();
        Ok(self.unary(
            Tensor::new(vec![indices.len()], out)?,
            Op::Gather {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }
}

fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let y = &*node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, reduce_to(g.clone(), val(*b).shape()))],
        Op::Sub(a, b) => vec![
            (*a, g.clone()),
            (*b, reduce_to(g.scale(-T::one()), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = binary(g, bv, "mul", |x, y| x * y).expect("forward shapes");
            let full = g.mul(av).expect("same shape");
            vec![(*a, ga), (*b, reduce_to(full, bv.shape()))]
        }
        Op::Scale(a, c) => vec![(*a, g.scale(*c))],
        Op::Shift(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = tensor::matmul(g, &bv.transpose().expect("rank 2")).expect("shapes");
            let gb = tensor::matmul(&av.transpose().expect("rank 2"), g).expect("shapes");
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(a) => vec![(*a, g.transpose().expect("rank 2"))],
        Op::Exp(a) => vec![(*a, g.mul(y).expect("same shape"))],
        Op::Sigmoid(a) => vec![(
            *a,
            g.zip_map(y, "sigmoid", |g, s| g * s * (T::one() - s))
                .expect("same shape"),
        )],
        Op::Silu(a) => vec![(
            *a,
            g.zip_map(val(*a), "silu", |g, x| {
                let s = scalar::sigmoid(x);
                g * (s + x * s * (T::one() - s))
            })
            .expect("same shape"),
        )],
        Op::Softplus(a) => vec![(
            *a,
            g.zip_map(val(*a), "softplus", |g, x| g * scalar::sigmoid(x))
                .expect("same shape"),
        )],
        Op::Softmax(a) => {
            let (_, n) = rows_cols(y);
            let mut out = g.clone();
            for ((o, gr), yr) in out
                .data_mut()
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(y.data().chunks(n))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in o.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![(*a, out)]
        }
        Op::LogSoftmax(a) => {
            let (_, n) = rows_cols(y);
            let mut out = g.clone();
            for ((o, gr), yr) in out
                .data_mut()
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(y.data().chunks(n))
            {
                let total: T = gr.iter().copied().sum();
                for ((o, &gv), &lv) in o.iter_mut().zip(gr).zip(yr) {
                    *o = gv - lv.exp() * total;
                }
            }
            vec![(*a, out)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let (_, n) = rows_cols(xv);
            let nf = T::from_usize_lossy(n);
            let mut gx = Tensor::zeros(xv.shape().to_vec());
            let mut gg = Tensor::zeros(vec![n]);
            let mut gb = Tensor::zeros(vec![n]);
            for (r, &(mean, rstd)) in stats.iter().enumerate() {
                let xr = &xv.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * rstd).collect();
                let dxhat: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                let m1 = dxhat.iter().copied().sum::<T>() / nf;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / nf;
                let gxr = &mut gx.data_mut()[r * n..(r + 1) * n];
                for j in 0..n {
                    gxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
                for j in 0..n {
                    gg.data_mut()[j] = gg.data()[j] + gr[j] * xhat[j];
                    gb.data_mut()[j] = gb.data()[j] + gr[j];
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::Conv1d { x, kernel, mode } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let (m, e) = (xv.shape()[0], xv.shape()[1]);
            let k = kv.shape()[0];
            let pad = mode.left_pad(k) as isize;
            let mut gx = Tensor::zeros(vec![m, e]);
            let mut gk = Tensor::zeros(vec![k, e]);
            for t in 0..m {
                for j in 0..k {
                    let src = t as isize + j as isize - pad;
                    if src < 0 || src >= m as isize {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..e {
                        let gt = g.data()[t * e + c];
                        gx.data_mut()[src * e + c] =
                            gx.data()[src * e + c] + kv.data()[j * e + c] * gt;
                        gk.data_mut()[j * e + c] =
                            gk.data()[j * e + c] + xv.data()[src * e + c] * gt;
                    }
                }
            }
            vec![(*x, gx), (*kernel, gk)]
        }
        Op::Conv2d { x, kernel, spec } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (kh, kw, o) = (kv.shape()[0], kv.shape()[1], kv.shape()[3]);
            let (oh, ow) = (y.shape()[0], y.shape()[1]);
            let mut gx = vec![T::zero(); xv.len()];
            let mut gk = vec![T::zero(); kv.len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gr = &g.data()[(oy * ow + ox) * o..(oy * ow + ox + 1) * o];
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((iy as usize) * w + ix as usize) * c;
                            for ci in 0..c {
                                let kbase = ((ky * kw + kx) * c + ci) * o;
                                let xvv = xv.data()[src + ci];
                                let mut acc = T::zero();
                                for oc in 0..o {
                                    acc = acc + kv.data()[kbase + oc] * gr[oc];
                                    gk[kbase + oc] = gk[kbase + oc] + xvv * gr[oc];
                                }
                                gx[src + ci] = gx[src + ci] + acc;
                            }
                        }
                    }
                }
            }
            vec![
                (*x, Tensor::new(xv.shape().to_vec(), gx).expect("shape")),
                (
                    *kernel,
                    Tensor::new(kv.shape().to_vec(), gk).expect("shape"),
                ),
            ]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))],
        Op::Mean(a) => {
            let n = T::from_usize_lossy(val(*a).len().max(1));
            vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n))]
        }
        Op::MeanRows(a) => {
            let xv = val(*a);
            let m = xv.shape()[0];
            let mf = T::from_usize_lossy(m);
            let row: Vec<T> = g.data().iter().map(|&v| v / mf).collect();
            let data = (0..m).flat_map(|_| row.iter().copied()).collect();
            vec![(*a, Tensor::new(xv.shape().to_vec(), data).expect("shape"))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec()).expect("same size"))],
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (m, n) = (xv.shape()[0], xv.shape()[1]);
            let len = y.shape()[1];
            let mut gx = Tensor::zeros(vec![m, n]);
            for r in 0..m {
                gx.data_mut()[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
            }
            vec![(*x, gx)]
        }
        Op::Rows { x, start } => {
            let xv = val(*x);
            let n = xv.last_dim();
            let mut gx = Tensor::zeros(xv.shape().to_vec());
            gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
            vec![(*x, gx)]
        }
        Op::ConcatCols(ids) => {
            let m = y.shape()[0];
            let mut offset = 0;
            ids.iter()
                .map(|&id| {
                    let w = val(id).shape()[1];
                    let mut out = Vec::with_capacity(m * w);
                    for r in 0..m {
                        out.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    (id, Tensor::new(vec![m, w], out).expect("shape"))
                })
                .collect()
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            ids.iter()
                .map(|&id| {
                    let n = val(id).len();
                    let part = Tensor::new(
                        val(id).shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )
                    .expect("shape");
                    offset += n;
                    (id, part)
                })
                .collect()
        }
        Op::UnfoldRows {
            x,
            kernel,
            left_pad,
        } => {
            let xv = val(*x);
            let (m, e) = (xv.shape()[0], xv.shape()[1]);
            let mut gx = Tensor::zeros(vec![m, e]);
            for t in 0..m {
                for j in 0..*kernel {
                    let src = t as isize + j as isize - *left_pad as isize;
                    if src < 0 || src >= m as isize {
                        continue;
                    }
                    let src = src as usize;
                    let gsrc = t * kernel * e + j * e;
                    for c in 0..e {
                        gx.data_mut()[src * e + c] = gx.data()[src * e + c] + g.data()[gsrc + c];
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Gather { x, indices } => {
            let mut gx = Tensor::zeros(val(*x).shape().to_vec());
            for (k, &i) in indices.iter().enumerate() {
                gx.data_mut()[i] = gx.data()[i] + g.data()[k];
            }
            vec![(*x, gx)]
        }
        Op::Custom { inputs, prim } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            prim.backward(&ins, y, g)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gi, &id)| gi.map(|t| (id, t)))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_reverses_once() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = x.mul(c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn broadcast_bias_gradient_is_summed() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([3, 2]));
        let b = tape.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let y = x.add(b).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = x.add(x).unwrap().mul(x).unwrap(); // 2x^2
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn gather_scatters_back() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64([4], &[1., 2., 3., 4.]).unwrap());
        let y = x.gather(&[3, 1]).unwrap();
        assert_eq!(y.value().data(), &[4.0, 2.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 1., 0., 1.]);
    }

    #[test]
    fn unfold_rows_zero_pads() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([2, 1], &[1., 2.]).unwrap());
        let u = x.unfold_rows(3, 1).unwrap();
        assert_eq!(u.value().data(), &[0., 1., 2., 1., 2., 0.]);
    }
}
