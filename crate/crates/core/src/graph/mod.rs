//! Minimal reverse-mode automatic differentiation over flat `f64` vectors.
//!
//! A [`Tape`] records nodes in creation order, which is always a valid
//! topological order. Values are computed eagerly when a node is pushed and can
//! be recomputed with [`Tape::forward`] after leaf values change, which is what
//! finite-difference checks rely on.
//!
//! Two reverse passes are provided:
//!
//! * [`Tape::backward`] accumulates numeric adjoints into a scratch buffer.
//! * [`Tape::vjp`] emits the adjoint computation as new nodes on the same tape.
//!   The result is itself differentiable, so a gradient estimate built from it
//!   can be squared and differentiated again with respect to other leaves.
//!
//! All values are stored in one contiguous arena; [`Tape::clear`] keeps the
//! allocation so a tape can be reused across Monte Carlo samples.

mod reverse;

pub use reverse::Gradients;

/// Clamp applied to the argument of `log`.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// Trainable leaf.
    Param,
    /// Constant leaf.
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift(f64),
    Exp,
    Log,
    Log1p,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    ClampMin(f64),
    Softmax,
    LogSumExp,
    Sum,
    Mean,
    Square,
    /// `W x` with `W` stored row-major as `rows x cols`.
    MatVec { rows: usize, cols: usize },
    /// `W^T x` with `W` stored row-major as `rows x cols`.
    MatTVec { rows: usize, cols: usize },
    /// Row-major outer product `a b^T`.
    Outer,
    /// Broadcast a length-1 input to the node length.
    Expand,
    Slice { start: usize },
    /// Embed the input at `start` in a zero vector of the node length.
    Pad { start: usize },
    Concat,
    StopGradient,
    /// Index of the largest entry (lowest index on ties). Forward only.
    MaxIndex,
    /// Heaviside `1[x > 0]`. Forward only.
    Step,
}

impl Op {
    /// Ops whose derivative is zero almost everywhere or undefined.
    pub fn is_differentiable(self) -> bool {
        !matches!(self, Op::StopGradient | Op::MaxIndex | Op::Step | Op::Const)
    }
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) a: u32,
    pub(crate) b: u32,
    pub(crate) offset: usize,
    pub(crate) len: usize,
    /// Depends on some `Param` leaf through differentiable ops.
    pub(crate) grad: bool,
}

impl Node {
    pub(crate) fn input_a(&self) -> Option<usize> {
        (self.a != NONE).then_some(self.a as usize)
    }

    pub(crate) fn input_b(&self) -> Option<usize> {
        (self.b != NONE).then_some(self.b as usize)
    }
}

/// A recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) data: Vec<f64>,
}

fn broadcast_len(la: usize, lb: usize) -> usize {
    if la == lb {
        la
    } else if la == 1 {
        lb
    } else if lb == 1 {
        la
    } else {
        panic!("shape mismatch in elementwise op: {la} vs {lb}")
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn log1p_clamped(x: f64) -> f64 {
    x.max(-1.0 + LOG_EPS).ln_1p()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `log sum exp(x)`, shifted by the maximum.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn binary(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64) {
    match (a.len(), b.len()) {
        (la, lb) if la == lb => {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = f(x, y);
            }
        }
        (1, _) => {
            let x = a[0];
            for (o, &y) in out.iter_mut().zip(b) {
                *o = f(x, y);
            }
        }
        _ => {
            let y = b[0];
            for (o, &x) in out.iter_mut().zip(a) {
                *o = f(x, y);
            }
        }
    }
}

fn unary(a: &[f64], out: &mut [f64], f: impl Fn(f64) -> f64) {
    for (o, &x) in out.iter_mut().zip(a) {
        *o = f(x);
    }
}

pub(crate) fn compute(op: Op, a: &[f64], b: &[f64], out: &mut [f64]) {
    match op {
        Op::Param | Op::Const => {}
        Op::Add => binary(a, b, out, |x, y| x + y),
        Op::Sub => binary(a, b, out, |x, y| x - y),
        Op::Mul => binary(a, b, out, |x, y| x * y),
        Op::Div => binary(a, b, out, |x, y| x / y),
        Op::Neg => unary(a, out, |x| -x),
        Op::Scale(c) => unary(a, out, |x| c * x),
        Op::Shift(c) => unary(a, out, |x| x + c),
        Op::Exp => unary(a, out, f64::exp),
        Op::Log => unary(a, out, |x| x.max(LOG_EPS).ln()),
        Op::Log1p => unary(a, out, log1p_clamped),
        Op::Sigmoid => unary(a, out, sigmoid),
        Op::Tanh => unary(a, out, f64::tanh),
        Op::Relu => unary(a, out, |x| x.max(0.0)),
        Op::Softplus => unary(a, out, softplus),
        Op::ClampMin(c) => unary(a, out, |x| x.max(c)),
        Op::Step => unary(a, out, |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::StopGradient => out.copy_from_slice(a),
        Op::Softmax => {
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &x) in out.iter_mut().zip(a) {
                *o = (x - m).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        Op::LogSumExp => out[0] = logsumexp(a),
        Op::Sum => out[0] = a.iter().sum(),
        Op::Mean => out[0] = a.iter().sum::<f64>() / a.len() as f64,
        Op::Square => unary(a, out, |x| x * x),
        Op::MatVec { rows, cols } => {
            for i in 0..rows {
                let row = &a[i * cols..(i + 1) * cols];
                out[i] = row.iter().zip(b).map(|(w, x)| w * x).sum();
            }
        }
        Op::MatTVec { rows, cols } => {
            out.fill(0.0);
            for i in 0..rows {
                let xi = b[i];
                if xi == 0.0 {
                    continue;
                }
                let row = &a[i * cols..(i + 1) * cols];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w * xi;
                }
            }
        }
        Op::Outer => {
            let cols = b.len();
            for (i, &ai) in a.iter().enumerate() {
                for (o, &bj) in out[i * cols..(i + 1) * cols].iter_mut().zip(b) {
                    *o = ai * bj;
                }
            }
        }
        Op::Expand => out.fill(a[0]),
        Op::Slice { start } => {
            let n = out.len();
            out.copy_from_slice(&a[start..start + n]);
        }
        Op::Pad { start } => {
            out.fill(0.0);
            out[start..start + a.len()].copy_from_slice(a);
        }
        Op::Concat => {
            out[..a.len()].copy_from_slice(a);
            out[a.len()..].copy_from_slice(b);
        }
        Op::MaxIndex => out[0] = argmax(a) as f64,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every node but keep the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.data.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.index()].len
    }

    pub fn op_of(&self, v: Var) -> Op {
        self.nodes[v.index()].op
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.index()];
        &self.data[n.offset..n.offset + n.len]
    }

    /// Value of a length-1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "node {} is not scalar", v.index());
        val[0]
    }

    /// True when `v` depends on a trainable leaf through differentiable ops.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].grad
    }

    fn push_leaf(&mut self, op: Op, value: &[f64]) -> Var {
        assert!(!value.is_empty(), "leaf must have positive length");
        let offset = self.data.len();
        self.data.extend_from_slice(value);
        self.nodes.push(Node {
            op,
            a: NONE,
            b: NONE,
            offset,
            len: value.len(),
            grad: op == Op::Param,
        });
        Var((self.nodes.len() - 1) as u32)
    }

    /// Trainable leaf. Its length is fixed for the life of the tape.
    pub fn param(&mut self, value: &[f64]) -> Var {
        self.push_leaf(Op::Param, value)
    }

    pub fn constant(&mut self, value: &[f64]) -> Var {
        self.push_leaf(Op::Const, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_leaf(Op::Const, &[value])
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.nodes.push(Node {
            op: Op::Const,
            a: NONE,
            b: NONE,
            offset,
            len,
            grad: false,
        });
        Var((self.nodes.len() - 1) as u32)
    }

    /// Overwrite a leaf value. Call [`Tape::forward`] afterwards to refresh dependents.
    pub fn set_value(&mut self, v: Var, value: &[f64]) {
        let n = self.nodes[v.index()];
        assert!(matches!(n.op, Op::Param | Op::Const), "only leaves can be set");
        assert_eq!(n.len, value.len(), "leaf length is immutable");
        self.data[n.offset..n.offset + n.len].copy_from_slice(value);
    }

    fn push(&mut self, op: Op, a: Var, b: Option<Var>, len: usize) -> Var {
        let na = self.nodes[a.index()];
        let nb = b.map(|b| self.nodes[b.index()]);
        let grad = op.is_differentiable() && (na.grad || nb.is_some_and(|n| n.grad));
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.nodes.push(Node {
            op,
            a: a.0,
            b: b.map_or(NONE, |b| b.0),
            offset,
            len,
            grad,
        });
        let idx = self.nodes.len() - 1;
        self.eval(idx);
        Var(idx as u32)
    }

    fn eval(&mut self, idx: usize) {
        let n = self.nodes[idx];
        if matches!(n.op, Op::Param | Op::Const) {
            return;
        }
        let (prev, rest) = self.data.split_at_mut(n.offset);
        let out = &mut rest[..n.len];
        let a = &self.nodes[n.a as usize];
        let a = &prev[a.offset..a.offset + a.len];
        let b: &[f64] = match n.input_b() {
            Some(b) => {
                let b = &self.nodes[b];
                &prev[b.offset..b.offset + b.len]
            }
            None => &[],
        };
        compute(n.op, a, b, out);
    }

    /// Recompute every node up to `root` from current leaf values.
    pub fn forward(&mut self, root: Var) -> crate::Result<Vec<f64>> {
        for idx in 0..=root.index() {
            self.eval(idx);
            let n = self.nodes[idx];
            if self.data[n.offset..n.offset + n.len]
                .iter()
                .any(|x| !x.is_finite())
            {
                return Err(crate::Error::Numerical { node: idx });
            }
        }
        Ok(self.value(root).to_vec())
    }

    /// Index of the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| self.data[n.offset..n.offset + n.len].iter().any(|x| !x.is_finite()))
    }

    fn binary_op(&mut self, op: Op, a: Var, b: Var) -> Var {
        let len = broadcast_len(self.len_of(a), self.len_of(b));
        self.push(op, a, Some(b), len)
    }

    fn unary_op(&mut self, op: Op, a: Var) -> Var {
        let len = self.len_of(a);
        self.push(op, a, None, len)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_op(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_op(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_op(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_op(Op::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary_op(Op::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_op(Op::Scale(c), a)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary_op(Op::Shift(c), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_op(Op::Exp, a)
    }

    /// Natural log with the argument clamped at [`LOG_EPS`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary_op(Op::Log, a)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary_op(Op::Log1p, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_op(Op::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary_op(Op::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_op(Op::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary_op(Op::Softplus, a)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary_op(Op::ClampMin(c), a)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.unary_op(Op::Softmax, a)
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        self.push(Op::LogSumExp, a, None, 1)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum, a, None, 1)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean, a, None, 1)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary_op(Op::Square, a)
    }

    /// `W x`; `w` holds `rows * len(x)` entries row-major.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let cols = self.len_of(x);
        let lw = self.len_of(w);
        assert!(lw % cols == 0, "matvec: {lw} weights do not tile {cols} columns");
        let rows = lw / cols;
        self.push(Op::MatVec { rows, cols }, w, Some(x), rows)
    }

    /// `W^T x`; `w` holds `len(x) * cols` entries row-major.
    pub fn mattvec(&mut self, w: Var, x: Var) -> Var {
        let rows = self.len_of(x);
        let lw = self.len_of(w);
        assert!(lw % rows == 0, "mattvec: {lw} weights do not tile {rows} rows");
        let cols = lw / rows;
        self.push(Op::MatTVec { rows, cols }, w, Some(x), cols)
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let len = self.len_of(a) * self.len_of(b);
        self.push(Op::Outer, a, Some(b), len)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    pub fn expand(&mut self, a: Var, len: usize) -> Var {
        assert_eq!(self.len_of(a), 1, "expand needs a scalar");
        self.push(Op::Expand, a, None, len)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.len_of(a), "slice out of range");
        self.push(Op::Slice { start }, a, None, len)
    }

    pub fn pad(&mut self, a: Var, start: usize, total: usize) -> Var {
        assert!(start + self.len_of(a) <= total, "pad out of range");
        self.push(Op::Pad { start }, a, None, total)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let len = self.len_of(a) + self.len_of(b);
        self.push(Op::Concat, a, Some(b), len)
    }

    /// Same value; contributes no adjoint.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        self.unary_op(Op::StopGradient, a)
    }

    pub fn max_index(&mut self, a: Var) -> Var {
        self.push(Op::MaxIndex, a, None, 1)
    }

    pub fn step(&mut self, a: Var) -> Var {
        self.unary_op(Op::Step, a)
    }

    /// `log sigmoid(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let na = self.neg(a);
        let sp = self.softplus(na);
        self.neg(sp)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let lse = self.logsumexp(a);
        self.sub(a, lse)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }
}
