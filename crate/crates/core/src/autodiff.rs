//! Tape-based reverse-mode differentiation.
//!
//! Every loss-to-parameter gradient in the engine flows through this module.
//! A [`Tape`] records one evaluation over a flat parameter array; [`Var`] is
//! a recorded scalar. The registered primitives are scalar add/sub/mul/div/
//! neg/exp/ln/sin/cos/sqrt/tanh/recip/max plus three fused vector ops
//! (matrix-vector product against parameter ranges, constant-coefficient
//! weighted sum, reciprocal norm). Networks here are small, so a scalar tape
//! with fused linear algebra is fast enough and easy to audit.
//!
//! Forward values of a recorded evaluation are bit-identical to an untaped
//! evaluation of the same generic code instantiated with a plain float: both
//! paths execute the same arithmetic in the same order.
//!
//! [`finite_difference_gradient`] is the independent oracle used by the
//! gradient checks; it never touches the tape.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

use crate::num::{Real, Scalar};

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("unsupported operation `{0}`")]
    UnsupportedOperation(String),
    #[error("tape already consumed by a backward pass")]
    StaleTape,
    #[error("seed count {got} does not match output count {expected}")]
    SeedCountMismatch { expected: usize, got: usize },
}

/// A contiguous slot range in the flat parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamRange {
    pub start: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Hands out disjoint [`ParamRange`]s while a model is being laid out.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    next: usize,
}

impl ParamAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reserve(&mut self, len: usize) -> ParamRange {
        let r = ParamRange { start: self.next, len };
        self.next += len;
        r
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// Flat parameter values with a same-length gradient accumulator.
///
/// Tapes read values through a shared borrow; gradient accumulation happens
/// at a single merge point via [`ParameterStore::accumulate`].
#[derive(Clone, Debug)]
pub struct ParameterStore<R: Real> {
    values: Vec<R>,
    gradient: Vec<R>,
}

impl<R: Real> ParameterStore<R> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![R::of(0.0); len],
            gradient: vec![R::of(0.0); len],
        }
    }

    pub fn from_values(values: Vec<R>) -> Self {
        let n = values.len();
        Self {
            values,
            gradient: vec![R::of(0.0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    pub fn gradient(&self) -> &[R] {
        &self.gradient
    }

    pub fn reset_gradient(&mut self) {
        self.gradient.fill(R::of(0.0));
    }

    pub fn accumulate(&mut self, grad: &[R]) {
        assert_eq!(grad.len(), self.gradient.len());
        for (g, d) in self.gradient.iter_mut().zip(grad) {
            *g += *d;
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Neg,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Tanh,
    Recip,
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum Node {
    Param,
    Const,
    Unary(UnOp, u32),
    Binary(BinOp, u32, u32),
    /// First of `m` output slots; `w`/`b` are parameter node ranges,
    /// inputs live in `aux[xs..xs + n]`.
    MatVec { w: u32, b: u32, xs: u32, m: u32, n: u32 },
    /// Continuation slot of a multi-output node.
    Follow,
    /// y = sum_k coeffs[c + k] * x_k with constant coefficients.
    WeightedSum { c: u32, xs: u32, n: u32 },
    /// y = 1 / sqrt(sum_k x_k^2)
    RecipNorm { xs: u32, n: u32 },
}

struct TapeInner<R> {
    nodes: Vec<Node>,
    vals: Vec<R>,
    aux: Vec<u32>,
    coeffs: Vec<R>,
    n_params: usize,
    consumed: bool,
}

/// One recorded evaluation over a parameter array.
pub struct Tape<R: Real> {
    inner: RefCell<TapeInner<R>>,
}

const CONST_IDX: u32 = u32::MAX;

impl<R: Real> Tape<R> {
    /// Registers `params` as the first nodes of a fresh tape.
    pub fn new(params: &[R]) -> Self {
        let mut vals = Vec::with_capacity(params.len() + 64);
        vals.extend_from_slice(params);
        Self {
            inner: RefCell::new(TapeInner {
                nodes: vec![Node::Param; params.len()],
                vals,
                aux: Vec::new(),
                coeffs: Vec::new(),
                n_params: params.len(),
                consumed: false,
            }),
        }
    }

    /// Evaluation context bound to this tape.
    pub fn ctx(&self) -> TapeCtx<'_, R> {
        TapeCtx { tape: self }
    }

    pub fn num_params(&self) -> usize {
        self.inner.borrow().n_params
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, node: Node, val: R) -> u32 {
        let mut t = self.inner.borrow_mut();
        t.nodes.push(node);
        t.vals.push(val);
        (t.nodes.len() - 1) as u32
    }

    /// Node index of `v`, materializing constants on first structural use.
    fn node_of(&self, v: Var<'_, R>) -> u32 {
        if v.idx == CONST_IDX {
            self.push(Node::Const, v.val)
        } else {
            v.idx
        }
    }

    fn unary<'t>(&'t self, op: UnOp, a: Var<'t, R>, val: R) -> Var<'t, R> {
        if a.idx == CONST_IDX {
            return Var { tape: self, idx: CONST_IDX, val };
        }
        let idx = self.push(Node::Unary(op, a.idx), val);
        Var { tape: self, idx, val }
    }

    fn binary<'t>(&'t self, op: BinOp, a: Var<'t, R>, b: Var<'t, R>, val: R) -> Var<'t, R> {
        debug_assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
        if a.idx == CONST_IDX && b.idx == CONST_IDX {
            return Var { tape: self, idx: CONST_IDX, val };
        }
        let ai = self.node_of(a);
        let bi = self.node_of(b);
        let idx = self.push(Node::Binary(op, ai, bi), val);
        Var { tape: self, idx, val }
    }

    /// Reverse pass from `outputs` seeded with `seeds`; returns the gradient
    /// of the seeded combination with respect to the parameter array.
    /// A tape can run backward once; later calls report a stale tape.
    fn backward_impl(&self, outputs: &[u32], seeds: &[R]) -> Result<Vec<R>, DiffError> {
        if outputs.len() != seeds.len() {
            return Err(DiffError::SeedCountMismatch {
                expected: outputs.len(),
                got: seeds.len(),
            });
        }
        let mut t = self.inner.borrow_mut();
        if t.consumed {
            return Err(DiffError::StaleTape);
        }
        t.consumed = true;
        let t = &*t;

        let mut adj = vec![R::of(0.0); t.nodes.len()];
        for (&o, &s) in outputs.iter().zip(seeds) {
            if o != CONST_IDX {
                adj[o as usize] += s;
            }
        }

        for i in (0..t.nodes.len()).rev() {
            let g = adj[i];
            // Zero adjoints propagate nothing; MatVec owns a whole output
            // block, so only its per-row adjoints may be skipped.
            if g == R::of(0.0) && !matches!(t.nodes[i], Node::MatVec { .. }) {
                continue;
            }
            match t.nodes[i] {
                Node::Param | Node::Const | Node::Follow => {}
                Node::Unary(op, a) => {
                    let a = a as usize;
                    let x = t.vals[a];
                    let y = t.vals[i];
                    let d = match op {
                        UnOp::Neg => -g,
                        UnOp::Exp => g * y,
                        UnOp::Ln => g / x,
                        UnOp::Sin => g * x.cos(),
                        UnOp::Cos => -g * x.sin(),
                        UnOp::Sqrt => g * R::of(0.5) / y,
                        UnOp::Tanh => g * (R::of(1.0) - y * y),
                        UnOp::Recip => -g * y * y,
                    };
                    adj[a] += d;
                }
                Node::Binary(op, a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let (xa, xb) = (t.vals[a], t.vals[b]);
                    match op {
                        BinOp::Add => {
                            adj[a] += g;
                            adj[b] += g;
                        }
                        BinOp::Sub => {
                            adj[a] += g;
                            adj[b] -= g;
                        }
                        BinOp::Mul => {
                            adj[a] += g * xb;
                            adj[b] += g * xa;
                        }
                        BinOp::Div => {
                            adj[a] += g / xb;
                            adj[b] -= g * xa / (xb * xb);
                        }
                        // Ties send the gradient to the first argument.
                        BinOp::Max => {
                            if xb > xa {
                                adj[b] += g;
                            } else {
                                adj[a] += g;
                            }
                        }
                    }
                }
                Node::MatVec { w, b, xs, m, n } => {
                    let (m, n) = (m as usize, n as usize);
                    let (w, b, xs) = (w as usize, b as usize, xs as usize);
                    for row in 0..m {
                        let gy = adj[i + row];
                        if gy == R::of(0.0) {
                            continue;
                        }
                        adj[b + row] += gy;
                        for col in 0..n {
                            let xj = t.aux[xs + col] as usize;
                            adj[w + row * n + col] += gy * t.vals[xj];
                            adj[xj] += gy * t.vals[w + row * n + col];
                        }
                    }
                }
                Node::WeightedSum { c, xs, n } => {
                    let (c, xs) = (c as usize, xs as usize);
                    for k in 0..n as usize {
                        adj[t.aux[xs + k] as usize] += g * t.coeffs[c + k];
                    }
                }
                Node::RecipNorm { xs, n } => {
                    let xs = xs as usize;
                    let y = t.vals[i];
                    let y3 = y * y * y;
                    for k in 0..n as usize {
                        let xj = t.aux[xs + k] as usize;
                        adj[xj] -= g * t.vals[xj] * y3;
                    }
                }
            }
        }

        adj.truncate(t.n_params);
        Ok(adj)
    }
}

/// A recorded scalar bound to a tape. Copy; arithmetic records nodes.
#[derive(Clone, Copy)]
pub struct Var<'t, R: Real> {
    tape: &'t Tape<R>,
    idx: u32,
    val: R,
}

impl<R: Real> fmt::Debug for Var<'_, R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({:?}@{})", self.val, self.idx as i64)
    }
}

impl<R: Real> PartialEq for Var<'_, R> {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl<R: Real> PartialOrd for Var<'_, R> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl<'t, R: Real> Add for Var<'t, R> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.tape.binary(BinOp::Add, self, rhs, self.val + rhs.val)
    }
}

impl<'t, R: Real> Sub for Var<'t, R> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.tape.binary(BinOp::Sub, self, rhs, self.val - rhs.val)
    }
}

impl<'t, R: Real> Mul for Var<'t, R> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.tape.binary(BinOp::Mul, self, rhs, self.val * rhs.val)
    }
}

impl<'t, R: Real> Div for Var<'t, R> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self.tape.binary(BinOp::Div, self, rhs, self.val / rhs.val)
    }
}

impl<'t, R: Real> Neg for Var<'t, R> {
    type Output = Self;
    fn neg(self) -> Self {
        self.tape.unary(UnOp::Neg, self, -self.val)
    }
}

impl<'t, R: Real> Scalar for Var<'t, R> {
    type R = R;

    fn primal(self) -> R {
        self.val
    }

    fn lift(self, v: R) -> Self {
        Var { tape: self.tape, idx: CONST_IDX, val: v }
    }

    fn exp(self) -> Self {
        self.tape.unary(UnOp::Exp, self, self.val.exp())
    }

    fn ln(self) -> Self {
        self.tape.unary(UnOp::Ln, self, self.val.ln())
    }

    fn sin(self) -> Self {
        self.tape.unary(UnOp::Sin, self, self.val.sin())
    }

    fn cos(self) -> Self {
        self.tape.unary(UnOp::Cos, self, self.val.cos())
    }

    fn sqrt(self) -> Self {
        self.tape.unary(UnOp::Sqrt, self, self.val.sqrt())
    }

    fn tanh(self) -> Self {
        self.tape.unary(UnOp::Tanh, self, self.val.tanh())
    }

    fn recip(self) -> Self {
        self.tape.unary(UnOp::Recip, self, self.val.recip())
    }

    fn max(self, other: Self) -> Self {
        self.tape
            .binary(BinOp::Max, self, other, self.val.max(other.val))
    }
}

/// Evaluation context: supplies constants, parameter reads, and the fused
/// vector primitives. [`PlainCtx`] evaluates on bare floats; [`TapeCtx`]
/// records the identical arithmetic on a tape.
pub trait EvalCtx<R: Real>: Copy {
    type S: Scalar<R = R>;

    fn k(self, v: R) -> Self::S;
    fn kf(self, v: f64) -> Self::S {
        self.k(R::of(v))
    }
    fn param(self, idx: usize) -> Self::S;

    /// y = W x + b with `w` row-major (`m*n` slots) and `b` of length `m`,
    /// both ranges in the parameter array.
    fn matvec(self, w: ParamRange, b: ParamRange, x: &[Self::S]) -> Vec<Self::S>;

    /// y = sum_k coeffs[k] * x[k] with constant coefficients.
    fn weighted_sum(self, coeffs: &[R], x: &[Self::S]) -> Self::S;

    /// y = 1 / sqrt(sum_k x[k]^2)
    fn recip_norm(self, x: &[Self::S]) -> Self::S;
}

/// Untaped evaluation over a shared parameter slice.
#[derive(Clone, Copy)]
pub struct PlainCtx<'a, R: Real> {
    pub values: &'a [R],
}

impl<'a, R: Real> PlainCtx<'a, R> {
    pub fn new(values: &'a [R]) -> Self {
        Self { values }
    }
}

impl<'a, R: Real> EvalCtx<R> for PlainCtx<'a, R> {
    type S = R;

    fn k(self, v: R) -> R {
        v
    }

    fn param(self, idx: usize) -> R {
        self.values[idx]
    }

    fn matvec(self, w: ParamRange, b: ParamRange, x: &[R]) -> Vec<R> {
        let (m, n) = (b.len, x.len());
        debug_assert_eq!(w.len, m * n);
        let wv = &self.values[w.start..w.end()];
        let bv = &self.values[b.start..b.end()];
        let mut y = Vec::with_capacity(m);
        for row in 0..m {
            let mut acc = bv[row];
            for col in 0..n {
                acc = acc + wv[row * n + col] * x[col];
            }
            y.push(acc);
        }
        y
    }

    fn weighted_sum(self, coeffs: &[R], x: &[R]) -> R {
        debug_assert_eq!(coeffs.len(), x.len());
        let mut acc = R::of(0.0);
        for (c, v) in coeffs.iter().zip(x) {
            acc = acc + *c * *v;
        }
        acc
    }

    fn recip_norm(self, x: &[R]) -> R {
        let mut acc = R::of(0.0);
        for v in x {
            acc = acc + *v * *v;
        }
        acc.sqrt().recip()
    }
}

/// Recording evaluation; hands out [`Var`]s bound to the tape.
#[derive(Clone, Copy)]
pub struct TapeCtx<'t, R: Real> {
    tape: &'t Tape<R>,
}

impl<'t, R: Real> TapeCtx<'t, R> {
    /// Dynamic primitive lookup. Anything outside the registered table is an
    /// unsupported operation.
    pub fn apply_named(
        self,
        name: &str,
        args: &[Var<'t, R>],
    ) -> Result<Var<'t, R>, DiffError> {
        let bad = || DiffError::UnsupportedOperation(name.to_string());
        match name {
            "add" | "sub" | "mul" | "div" | "max" => {
                let [a, b] = args else { return Err(bad()) };
                Ok(match name {
                    "add" => *a + *b,
                    "sub" => *a - *b,
                    "mul" => *a * *b,
                    "div" => *a / *b,
                    _ => a.max(*b),
                })
            }
            "neg" | "exp" | "ln" | "sin" | "cos" | "sqrt" | "tanh" | "recip" => {
                let [a] = args else { return Err(bad()) };
                Ok(match name {
                    "neg" => -*a,
                    "exp" => a.exp(),
                    "ln" => a.ln(),
                    "sin" => a.sin(),
                    "cos" => a.cos(),
                    "sqrt" => a.sqrt(),
                    "tanh" => a.tanh(),
                    _ => a.recip(),
                })
            }
            "recip_norm" => {
                if args.is_empty() {
                    return Err(bad());
                }
                Ok(self.recip_norm(args))
            }
            _ => Err(DiffError::UnsupportedOperation(name.to_string())),
        }
    }
}

impl<'t, R: Real> EvalCtx<R> for TapeCtx<'t, R> {
    type S = Var<'t, R>;

    fn k(self, v: R) -> Var<'t, R> {
        Var { tape: self.tape, idx: CONST_IDX, val: v }
    }

    fn param(self, idx: usize) -> Var<'t, R> {
        let t = self.tape.inner.borrow();
        debug_assert!(idx < t.n_params);
        Var { tape: self.tape, idx: idx as u32, val: t.vals[idx] }
    }

    fn matvec(self, w: ParamRange, b: ParamRange, x: &[Var<'t, R>]) -> Vec<Var<'t, R>> {
        let (m, n) = (b.len, x.len());
        debug_assert_eq!(w.len, m * n);
        let mut t = self.tape.inner.borrow_mut();
        debug_assert!(w.end() <= t.n_params && b.end() <= t.n_params);
        let xs = t.aux.len() as u32;
        // Constants among the inputs are materialized inline.
        let mut xi = Vec::with_capacity(n);
        for v in x {
            if v.idx == CONST_IDX {
                t.nodes.push(Node::Const);
                t.vals.push(v.val);
                xi.push((t.nodes.len() - 1) as u32);
            } else {
                xi.push(v.idx);
            }
        }
        t.aux.extend_from_slice(&xi);

        let base = t.nodes.len() as u32;
        let mut out = Vec::with_capacity(m);
        for row in 0..m {
            let mut acc = t.vals[b.start + row];
            for col in 0..n {
                acc = acc + t.vals[w.start + row * n + col] * x[col].val;
            }
            t.nodes.push(if row == 0 {
                Node::MatVec {
                    w: w.start as u32,
                    b: b.start as u32,
                    xs,
                    m: m as u32,
                    n: n as u32,
                }
            } else {
                Node::Follow
            });
            t.vals.push(acc);
            out.push(Var { tape: self.tape, idx: base + row as u32, val: acc });
        }
        out
    }

    fn weighted_sum(self, coeffs: &[R], x: &[Var<'t, R>]) -> Var<'t, R> {
        debug_assert_eq!(coeffs.len(), x.len());
        let mut acc = R::of(0.0);
        for (c, v) in coeffs.iter().zip(x) {
            acc = acc + *c * v.val;
        }
        if x.iter().all(|v| v.idx == CONST_IDX) {
            return self.k(acc);
        }
        let mut t = self.tape.inner.borrow_mut();
        let c0 = t.coeffs.len() as u32;
        t.coeffs.extend_from_slice(coeffs);
        let xs = t.aux.len() as u32;
        let mut xi = Vec::with_capacity(x.len());
        for v in x {
            if v.idx == CONST_IDX {
                t.nodes.push(Node::Const);
                t.vals.push(v.val);
                xi.push((t.nodes.len() - 1) as u32);
            } else {
                xi.push(v.idx);
            }
        }
        t.aux.extend_from_slice(&xi);
        t.nodes.push(Node::WeightedSum { c: c0, xs, n: x.len() as u32 });
        t.vals.push(acc);
        let idx = (t.nodes.len() - 1) as u32;
        Var { tape: self.tape, idx, val: acc }
    }

    fn recip_norm(self, x: &[Var<'t, R>]) -> Var<'t, R> {
        let mut acc = R::of(0.0);
        for v in x {
            acc = acc + v.val * v.val;
        }
        let val = acc.sqrt().recip();
        if x.iter().all(|v| v.idx == CONST_IDX) {
            return self.k(val);
        }
        let mut t = self.tape.inner.borrow_mut();
        let xs = t.aux.len() as u32;
        let mut xi = Vec::with_capacity(x.len());
        for v in x {
            if v.idx == CONST_IDX {
                t.nodes.push(Node::Const);
                t.vals.push(v.val);
                xi.push((t.nodes.len() - 1) as u32);
            } else {
                xi.push(v.idx);
            }
        }
        t.aux.extend_from_slice(&xi);
        t.nodes.push(Node::RecipNorm { xs, n: x.len() as u32 });
        t.vals.push(val);
        let idx = (t.nodes.len() - 1) as u32;
        Var { tape: self.tape, idx, val }
    }
}

/// A sealed recording: the tape plus its designated outputs.
pub struct Recording<R: Real> {
    tape: Tape<R>,
    outputs: Vec<u32>,
    out_vals: Vec<R>,
}

impl<R: Real> Recording<R> {
    pub fn output_values(&self) -> &[R] {
        &self.out_vals
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.tape.num_nodes()
    }

    /// Seeds each output with the matching entry of `seeds` and runs the
    /// reverse pass. Consumes the recording's single backward budget.
    pub fn backward(&self, seeds: &[R]) -> Result<Vec<R>, DiffError> {
        self.tape.backward_impl(&self.outputs, seeds)
    }

    /// Single-output convenience.
    pub fn backward_scalar(&self, seed: R) -> Result<Vec<R>, DiffError> {
        if self.outputs.len() != 1 {
            return Err(DiffError::SeedCountMismatch { expected: self.outputs.len(), got: 1 });
        }
        self.backward(&[seed])
    }
}

/// Records `f` over `params`, returning the sealed tape and output values.
pub fn record<R: Real, F>(params: &[R], f: F) -> Recording<R>
where
    F: for<'t> FnOnce(TapeCtx<'t, R>) -> Vec<Var<'t, R>>,
{
    let tape = Tape::new(params);
    let (outputs, out_vals) = {
        let outs = f(tape.ctx());
        (
            outs.iter().map(|v| v.idx).collect::<Vec<_>>(),
            outs.iter().map(|v| v.val).collect::<Vec<_>>(),
        )
    };
    Recording { tape, outputs, out_vals }
}

/// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn finite_difference_gradient<R: Real, F>(mut f: F, x: &[R], step: R) -> Vec<R>
where
    F: FnMut(&[R]) -> R,
{
    assert!(step > R::of(0.0), "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + step;
        let fp = f(&probe);
        probe[i] = xi - step;
        let fm = f(&probe);
        probe[i] = xi;
        grad.push((fp - fm) / (step + step));
    }
    grad
}

/// |a - b| / max(|a|, |b|, floor); the comparison used by gradient checks.
pub fn relative_error<R: Real>(a: R, b: R) -> R {
    let floor = R::of(1e-6);
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}
