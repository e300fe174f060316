use super::{sigmoid, Node, Op, Tape, Var, LOG_EPS};
use crate::error::{contract, Result};

/// Numeric adjoints of every trainable leaf reached by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == v)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient for `v`, or panics if `v` is not a trainable leaf on the tape.
    pub fn wrt(&self, v: Var) -> &[f64] {
        self.get(v)
            .unwrap_or_else(|| panic!("node {} is not a parameter", v.index()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &[f64])> {
        self.entries.iter().map(|(v, g)| (*v, g.as_slice()))
    }
}

/// Adds `f(i)` into `dst`, summing when `dst` was broadcast from length 1.
#[inline]
fn accum(dst: &mut [f64], n: usize, f: impl Fn(usize) -> f64) {
    if dst.len() == n {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(i);
        }
    } else {
        dst[0] += (0..n).map(f).sum::<f64>();
    }
}

#[inline]
fn bcast(xs: &[f64], i: usize) -> f64 {
    if xs.len() == 1 {
        xs[0]
    } else {
        xs[i]
    }
}

/// Adds the contribution of output adjoint `g` into the adjoint of input `which`.
fn pullback(op: Op, which: usize, a: &[f64], b: &[f64], out: &[f64], g: &[f64], dst: &mut [f64]) {
    let n = g.len();
    match op {
        Op::Param | Op::Const | Op::StopGradient | Op::MaxIndex | Op::Step => {}
        Op::Add => accum(dst, n, |i| g[i]),
        Op::Sub => {
            if which == 0 {
                accum(dst, n, |i| g[i])
            } else {
                accum(dst, n, |i| -g[i])
            }
        }
        Op::Mul => {
            let other = if which == 0 { b } else { a };
            accum(dst, n, |i| g[i] * bcast(other, i))
        }
        Op::Div => {
            if which == 0 {
                accum(dst, n, |i| g[i] / bcast(b, i))
            } else {
                accum(dst, n, |i| {
                    let bi = bcast(b, i);
                    -g[i] * bcast(a, i) / (bi * bi)
                })
            }
        }
        Op::Neg => accum(dst, n, |i| -g[i]),
        Op::Scale(c) => accum(dst, n, |i| c * g[i]),
        Op::Shift(_) => accum(dst, n, |i| g[i]),
        Op::Exp => accum(dst, n, |i| g[i] * out[i]),
        Op::Log => accum(dst, n, |i| g[i] / a[i].max(LOG_EPS)),
        Op::Log1p => accum(dst, n, |i| g[i] / (1.0 + a[i].max(-1.0 + LOG_EPS))),
        Op::Sigmoid => accum(dst, n, |i| g[i] * out[i] * (1.0 - out[i])),
        Op::Tanh => accum(dst, n, |i| g[i] * (1.0 - out[i] * out[i])),
        Op::Relu => accum(dst, n, |i| if a[i] > 0.0 { g[i] } else { 0.0 }),
        Op::Softplus => accum(dst, n, |i| g[i] * sigmoid(a[i])),
        Op::ClampMin(c) => accum(dst, n, |i| if a[i] > c { g[i] } else { 0.0 }),
        Op::Softmax => {
            let dot: f64 = g.iter().zip(out).map(|(x, s)| x * s).sum();
            accum(dst, n, |i| out[i] * (g[i] - dot))
        }
        Op::LogSumExp => {
            for (d, &x) in dst.iter_mut().zip(a) {
                *d += g[0] * (x - out[0]).exp();
            }
        }
        Op::Sum => dst.iter_mut().for_each(|d| *d += g[0]),
        Op::Mean => {
            let s = g[0] / a.len() as f64;
            dst.iter_mut().for_each(|d| *d += s)
        }
        Op::Square => accum(dst, n, |i| 2.0 * a[i] * g[i]),
        Op::MatVec { rows, cols } => {
            if which == 0 {
                for i in 0..rows {
                    let gi = g[i];
                    for (d, &x) in dst[i * cols..(i + 1) * cols].iter_mut().zip(b) {
                        *d += gi * x;
                    }
                }
            } else {
                for i in 0..rows {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for (d, &w) in dst.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
                        *d += w * gi;
                    }
                }
            }
        }
        Op::MatTVec { rows, cols } => {
            if which == 0 {
                for i in 0..rows {
                    let xi = b[i];
                    for (d, &gj) in dst[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                        *d += xi * gj;
                    }
                }
            } else {
                for (i, d) in dst.iter_mut().enumerate().take(rows) {
                    let row = &a[i * cols..(i + 1) * cols];
                    *d += row.iter().zip(g).map(|(w, gj)| w * gj).sum::<f64>();
                }
            }
        }
        Op::Outer => {
            let cols = b.len();
            if which == 0 {
                for (i, d) in dst.iter_mut().enumerate() {
                    let row = &g[i * cols..(i + 1) * cols];
                    *d += row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                }
            } else {
                for (i, &ai) in a.iter().enumerate() {
                    for (d, &gij) in dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                        *d += gij * ai;
                    }
                }
            }
        }
        Op::Expand => dst[0] += g.iter().sum::<f64>(),
        Op::Slice { start } => {
            for (d, &x) in dst[start..start + n].iter_mut().zip(g) {
                *d += x;
            }
        }
        Op::Pad { start } => {
            for (d, &x) in dst.iter_mut().zip(&g[start..]) {
                *d += x;
            }
        }
        Op::Concat => {
            let off = if which == 0 { 0 } else { a.len() };
            for (d, &x) in dst.iter_mut().zip(&g[off..]) {
                *d += x;
            }
        }
    }
}

impl Tape {
    fn slice_of(&self, n: &Node) -> &[f64] {
        &self.data[n.offset..n.offset + n.len]
    }

    /// Gradient of the scalar `root` with respect to every trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let active: Vec<bool> = self.nodes[..=root.index()].iter().map(|n| n.grad).collect();
        let adj = self.reverse_numeric(root, &active)?;
        let entries = self.nodes[..=root.index()]
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Param)
            .map(|(i, n)| (Var(i as u32), adj[n.offset..n.offset + n.len].to_vec()))
            .collect();
        Ok(Gradients { entries })
    }

    /// Gradient of the scalar `root` with respect to the listed leaves only.
    ///
    /// Subgraphs that do not depend on any of `wrt` are skipped.
    pub fn backward_wrt(&self, root: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>> {
        let active = self.dependents(root, wrt);
        let adj = self.reverse_numeric(root, &active)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                if v.index() > root.index() {
                    vec![0.0; self.len_of(v)]
                } else {
                    let n = &self.nodes[v.index()];
                    adj[n.offset..n.offset + n.len].to_vec()
                }
            })
            .collect())
    }

    /// Marks nodes up to `root` that depend on any of `wrt` through differentiable ops.
    fn dependents(&self, root: Var, wrt: &[Var]) -> Vec<bool> {
        let mut active = vec![false; root.index() + 1];
        for v in wrt {
            if v.index() <= root.index() {
                active[v.index()] = true;
            }
        }
        for i in 0..=root.index() {
            if active[i] {
                continue;
            }
            let n = &self.nodes[i];
            if !n.op.is_differentiable() {
                continue;
            }
            active[i] = n.input_a().is_some_and(|a| active[a]) || n.input_b().is_some_and(|b| active[b]);
        }
        active
    }

    fn reverse_numeric(&self, root: Var, active: &[bool]) -> Result<Vec<f64>> {
        let rn = self.nodes[root.index()];
        if rn.len != 1 {
            return contract(format!("backward root must be scalar, got length {}", rn.len));
        }
        let mut adj = vec![0.0; rn.offset + rn.len];
        adj[rn.offset] = 1.0;
        for i in (0..=root.index()).rev() {
            if !active[i] {
                continue;
            }
            let n = self.nodes[i];
            if matches!(n.op, Op::Param | Op::Const) || !n.op.is_differentiable() {
                continue;
            }
            let (lower, upper) = adj.split_at_mut(n.offset);
            let g = &upper[..n.len];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let out = self.slice_of(&n);
            let a_node = n.input_a().map(|a| self.nodes[a]);
            let b_node = n.input_b().map(|b| self.nodes[b]);
            let a_val = a_node.as_ref().map_or(&[][..], |x| self.slice_of(x));
            let b_val = b_node.as_ref().map_or(&[][..], |x| self.slice_of(x));
            for (which, input) in [(0, n.input_a()), (1, n.input_b())] {
                let Some(j) = input else { continue };
                if !active[j] {
                    continue;
                }
                let jn = self.nodes[j];
                let dst = &mut lower[jn.offset..jn.offset + jn.len];
                pullback(n.op, which, a_val, b_val, out, g, dst);
            }
        }
        Ok(adj)
    }

    /// Vector-Jacobian product emitted as graph nodes.
    ///
    /// Each `(output, seed)` pair initialises the adjoint of `output` with the
    /// node `seed` (same length, or length 1 to broadcast). Returns a node
    /// holding `sum_k seed_k^T d(output_k)/d(wrt)`. Seeds may themselves depend
    /// on other leaves; the emitted expression stays differentiable in them,
    /// while the seeds are not differentiated with respect to `wrt`.
    pub fn vjp(&mut self, seeds: &[(Var, Var)], wrt: Var) -> Result<Var> {
        let Some(hi) = seeds.iter().map(|(o, _)| o.index()).max() else {
            return Ok(self.zeros(self.len_of(wrt)));
        };
        if wrt.index() > hi {
            return Ok(self.zeros(self.len_of(wrt)));
        }
        let lo = wrt.index();
        let mut depends = vec![false; hi + 1];
        depends[lo] = true;
        for i in lo + 1..=hi {
            let n = &self.nodes[i];
            if matches!(n.op, Op::StopGradient | Op::Param | Op::Const) {
                continue;
            }
            depends[i] =
                n.input_a().is_some_and(|a| depends[a]) || n.input_b().is_some_and(|b| depends[b]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; hi + 1];
        for &(out, seed) in seeds {
            if !depends[out.index()] {
                continue;
            }
            let lo_len = self.len_of(out);
            let ls = self.len_of(seed);
            let seed = if ls == lo_len {
                seed
            } else if ls == 1 {
                self.expand(seed, lo_len)
            } else {
                return contract(format!("seed length {ls} does not match output length {lo_len}"));
            };
            self.accumulate(&mut adj, out.index(), seed);
        }

        for i in (lo + 1..=hi).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let n = self.nodes[i];
            if matches!(n.op, Op::MaxIndex | Op::Step) {
                return contract(format!(
                    "non-differentiable op {:?} at node {i} lies on the differentiated path",
                    n.op
                ));
            }
            let node = Var(i as u32);
            let a = n.input_a().map(|a| Var(a as u32));
            let b = n.input_b().map(|b| Var(b as u32));
            let da = a.filter(|a| depends[a.index()]);
            let db = b.filter(|b| depends[b.index()]);
            if da.is_none() && db.is_none() {
                continue;
            }
            for (which, target) in [(0, da), (1, db)] {
                let Some(target) = target else { continue };
                let c = self.emit_pullback(n.op, which, node, a, b, g, target);
                self.accumulate(&mut adj, target.index(), c);
            }
        }

        Ok(match adj[lo] {
            Some(g) => g,
            None => self.zeros(self.len_of(wrt)),
        })
    }

    /// Gradient of scalar `root` with respect to `wrt`, as a differentiable node.
    pub fn grad(&mut self, root: Var, wrt: Var) -> Result<Var> {
        if self.len_of(root) != 1 {
            return contract("grad root must be scalar");
        }
        let one = self.scalar(1.0);
        self.vjp(&[(root, one)], wrt)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], idx: usize, c: Var) {
        adj[idx] = Some(match adj[idx] {
            None => c,
            Some(prev) => self.add(prev, c),
        });
    }

    /// Reduce a contribution to the input's length when it was broadcast.
    fn fit(&mut self, c: Var, len: usize) -> Var {
        if self.len_of(c) == len {
            c
        } else {
            debug_assert_eq!(len, 1);
            self.sum(c)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_pullback(
        &mut self,
        op: Op,
        which: usize,
        node: Var,
        a: Option<Var>,
        b: Option<Var>,
        g: Var,
        target: Var,
    ) -> Var {
        let tl = self.len_of(target);
        let a = a.expect("op has an input");
        match op {
            Op::Add | Op::Shift(_) => self.fit(g, tl),
            Op::Sub => {
                if which == 0 {
                    self.fit(g, tl)
                } else {
                    let ng = self.neg(g);
                    self.fit(ng, tl)
                }
            }
            Op::Mul => {
                let other = if which == 0 { b.unwrap() } else { a };
                let c = self.mul(g, other);
                self.fit(c, tl)
            }
            Op::Div => {
                let b = b.unwrap();
                if which == 0 {
                    let c = self.div(g, b);
                    self.fit(c, tl)
                } else {
                    let go = self.mul(g, node);
                    let q = self.div(go, b);
                    let c = self.neg(q);
                    self.fit(c, tl)
                }
            }
            Op::Neg => self.neg(g),
            Op::Scale(c) => self.scale(g, c),
            Op::Exp => self.mul(g, node),
            Op::Log => {
                let x = self.clamp_min(a, LOG_EPS);
                self.div(g, x)
            }
            Op::Log1p => {
                let x = self.clamp_min(a, -1.0 + LOG_EPS);
                let x = self.shift(x, 1.0);
                self.div(g, x)
            }
            Op::Sigmoid => {
                let ns = self.neg(node);
                let one_minus = self.shift(ns, 1.0);
                let d = self.mul(node, one_minus);
                self.mul(g, d)
            }
            Op::Tanh => {
                let t2 = self.square(node);
                let nt2 = self.neg(t2);
                let d = self.shift(nt2, 1.0);
                self.mul(g, d)
            }
            Op::Relu => {
                let mask = self.step(a);
                self.mul(g, mask)
            }
            Op::Softplus => {
                let s = self.sigmoid(a);
                self.mul(g, s)
            }
            Op::ClampMin(c) => {
                let shifted = self.shift(a, -c);
                let mask = self.step(shifted);
                self.mul(g, mask)
            }
            Op::Softmax => {
                let gs = self.mul(g, node);
                let dot = self.sum(gs);
                let centered = self.sub(g, dot);
                self.mul(node, centered)
            }
            Op::LogSumExp => {
                let s = self.softmax(a);
                self.mul(s, g)
            }
            Op::Sum => self.expand(g, tl),
            Op::Mean => {
                let e = self.expand(g, tl);
                self.scale(e, 1.0 / tl as f64)
            }
            Op::Square => {
                let two_x = self.scale(a, 2.0);
                self.mul(g, two_x)
            }
            Op::MatVec { .. } => {
                let b = b.unwrap();
                if which == 0 {
                    self.outer(g, b)
                } else {
                    self.mattvec(a, g)
                }
            }
            Op::MatTVec { .. } => {
                let b = b.unwrap();
                if which == 0 {
                    self.outer(b, g)
                } else {
                    self.matvec(a, g)
                }
            }
            Op::Outer => {
                let b = b.unwrap();
                if which == 0 {
                    self.matvec(g, b)
                } else {
                    self.mattvec(g, a)
                }
            }
            Op::Expand => self.sum(g),
            Op::Slice { start } => self.pad(g, start, tl),
            Op::Pad { start } => self.slice(g, start, tl),
            Op::Concat => {
                let la = self.len_of(a);
                if which == 0 {
                    self.slice(g, 0, la)
                } else {
                    self.slice(g, la, tl)
                }
            }
            Op::Param | Op::Const | Op::StopGradient | Op::MaxIndex | Op::Step => {
                unreachable!("no pullback for {op:?}")
            }
        }
    }
}
