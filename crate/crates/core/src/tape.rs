//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use lpb_core::tape::Tape;
//! use lpb_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, shape_err, Result};
use crate::real::Real;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    SumSquares(Var),
    MeanSquares(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `x[m×k] · w[k×n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = xv.last_dim();
        let m = xv.rows();
        if wv.shape().len() != 2 || wv.shape()[0] != k {
            return Err(shape_err(&[k, wv.last_dim()], wv.shape()));
        }
        let n = wv.shape()[1];
        let mut out = vec![T::ZERO; m * n];
        tensor::matmul(xv.data(), wv.data(), m, k, n, &mut out);
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::MatMul(x, w), ng))
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.last_dim() {
            return Err(shape_err(&[xv.last_dim()], bv.shape()));
        }
        let mut t = xv.clone();
        tensor::add_bias(t.data_mut(), bv.data());
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(T::ZERO));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat of zero tensors"));
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != m {
                return Err(shape_err(&[m, v.last_dim()], v.shape()));
            }
            widths.push(v.last_dim());
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![T::ZERO; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Scalar `Σ x²`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// Scalar `mean(x²)`.
    pub fn mean_squares(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum_squares() / T::from_usize(v.len().max(1));
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanSquares(x), ng)
    }

    /// Propagates `d output / d node` to every node that needs a gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), T::ONE));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (xv.rows(), xv.last_dim(), wv.shape()[1]);
                    if self.ng(*x) {
                        let dx = acc(&mut grads, *x, xv.shape());
                        tensor::matmul_bt_acc(g.data(), wv.data(), m, k, n, dx);
                    }
                    if self.ng(*w) {
                        let dw = acc(&mut grads, *w, wv.shape());
                        tensor::matmul_at_acc(xv.data(), g.data(), m, k, n, dw);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.ng(*b) {
                        let bshape = self.value(*b).shape().to_vec();
                        let db = acc(&mut grads, *b, &bshape);
                        let n = db.len();
                        for row in g.data().chunks_exact(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += *r;
                            }
                        }
                    }
                    if self.ng(*x) {
                        add_into(&mut grads, *x, self.value(*x).shape(), g.data());
                    }
                }
                Op::Tanh(x) => {
                    if self.ng(*x) {
                        let y = node.value.data();
                        let dx = acc(&mut grads, *x, node.value.shape());
                        for ((d, gi), yi) in dx.iter_mut().zip(g.data()).zip(y) {
                            *d += *gi * (T::ONE - *yi * *yi);
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.ng(*x) {
                        let xin = self.value(*x).data();
                        let dx = acc(&mut grads, *x, node.value.shape());
                        for ((d, gi), xi) in dx.iter_mut().zip(g.data()).zip(xin) {
                            if *xi > T::ZERO {
                                *d += *gi;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        add_into(&mut grads, *a, node.value.shape(), g.data());
                    }
                    if self.ng(*b) {
                        add_into(&mut grads, *b, node.value.shape(), g.data());
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        add_into(&mut grads, *a, node.value.shape(), g.data());
                    }
                    if self.ng(*b) {
                        let db = acc(&mut grads, *b, node.value.shape());
                        for (d, gi) in db.iter_mut().zip(g.data()) {
                            *d -= *gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b).data();
                        let da = acc(&mut grads, *a, node.value.shape());
                        for ((d, gi), bi) in da.iter_mut().zip(g.data()).zip(bv) {
                            *d += *gi * *bi;
                        }
                    }
                    if self.ng(*b) {
                        let av = self.value(*a).data();
                        let db = acc(&mut grads, *b, node.value.shape());
                        for ((d, gi), ai) in db.iter_mut().zip(g.data()).zip(av) {
                            *d += *gi * *ai;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if self.ng(*x) {
                        let dx = acc(&mut grads, *x, node.value.shape());
                        for (d, gi) in dx.iter_mut().zip(g.data()) {
                            *d += *gi * *c;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.rows();
                    let n = node.value.last_dim();
                    let mut off = 0;
                    for p in parts {
                        let pshape = self.value(*p).shape().to_vec();
                        let w = self.value(*p).last_dim();
                        if self.ng(*p) {
                            let dp = acc(&mut grads, *p, &pshape);
                            for i in 0..m {
                                let src = &g.data()[i * n + off..i * n + off + w];
                                for (d, s) in dp[i * w..(i + 1) * w].iter_mut().zip(src) {
                                    *d += *s;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SumSquares(x) | Op::MeanSquares(x) => {
                    if self.ng(*x) {
                        let xv = self.value(*x);
                        let mut c = (T::ONE + T::ONE) * g.data()[0];
                        if matches!(node.op, Op::MeanSquares(_)) {
                            c = c / T::from_usize(xv.len().max(1));
                        }
                        let xs = xv.data();
                        let shape = xv.shape().to_vec();
                        let dx = acc(&mut grads, *x, &shape);
                        for (d, xi) in dx.iter_mut().zip(xs) {
                            *d += c * *xi;
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], g: &[T]) {
    let d = acc(grads, v, shape);
    for (di, gi) in d.iter_mut().zip(g) {
        *di += *gi;
    }
}
