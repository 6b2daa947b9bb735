//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; nodes are
//! therefore topologically ordered by construction. [`Tape::backward`] walks
//! the nodes once in reverse order and accumulates gradients into the leaves.
//!
//! Leaves created with [`Tape::leaf`] borrow their data from a [`Tensor`], so
//! binding model parameters does not copy them.

use std::borrow::Cow;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x W^T + b` with `x: [B, k]` (or `[k]`), `W: [m, k]`, `b: [m]`.
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Mul(Var, Var),
    Add(Var, Var),
    /// Concatenation along the last dimension.
    Concat(Var, Var),
    /// Columns `start..start + len` along the last dimension.
    Slice {
        src: Var,
        start: usize,
        len: usize,
    },
    /// Multiplication by a constant (dropout) mask.
    Mask {
        src: Var,
        mask: Rc<[f64]>,
    },
    /// Row lookup into a `[V, n]` table.
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    StackRows(Vec<Var>),
    /// Per-row `-log softmax(logits)[target]`; `lse` caches each row's log-sum-exp.
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        lse: Vec<f64>,
    },
    Sum(Var),
    Scale(Var, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Sum(a) | Op::Scale(a, _) => vec![*a],
            Op::Mul(a, b) | Op::Add(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Slice { src, .. } | Op::Mask { src, .. } => vec![*src],
            Op::Gather { table, .. } => vec![*table],
            Op::StackRows(parts) => parts.clone(),
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
///
/// Gradients from repeated [`backward`](Tape::backward) calls accumulate in
/// the leaf gradient slots until [`reset`](Tape::reset) is called.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows(shape: &[usize]) -> usize {
    shape.iter().product::<usize>() / last_dim(shape).max(1)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes and gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            op => op.inputs().iter().any(|v| self.nodes[v.index].needs_grad),
        };
        self.push_with(shape, value, op, needs_grad)
    }

    fn push_with(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(())
    }

    /// Borrows a tensor as a leaf; it receives gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push_with(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Borrows a tensor as a leaf that never receives gradients.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_with(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Takes ownership of a tensor as a leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_with(shape, Cow::Owned(t.into_data()), Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.input(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.index];
        Tensor::new(&n.shape, n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.index].value[0]
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.index).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.leaf_grads.get_mut(v.index).and_then(Option::take)
    }

    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        for v in [w, b, x] {
            self.check(v)?;
        }
        let (ws, bs, xs) = (self.shape(w).to_vec(), self.shape(b).to_vec(), self.shape(x).to_vec());
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || last_dim(&xs) != ws[1] {
            return Err(Error::shape("affine", &ws, &xs));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("affine bias", &ws, &bs));
        }
        let (m, k) = (ws[0], ws[1]);
        let batch = rows(&xs);
        let bias = self.value(b);
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm_x_wt(batch, k, m, self.value(x), self.value(w), &mut out);
        let shape = if xs.len() == 1 { vec![m] } else { vec![batch, m] };
        Ok(self.push(shape, Cow::Owned(out), Op::Affine { x, w, b }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let out: Vec<f64> = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), op))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |v| v * k, Op::Scale(a, k))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), op))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Joins `a` and `b` along the last dimension, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (na, nb) = (last_dim(&sa), last_dim(&sb));
        let r = rows(&sa);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (na + nb));
        for i in 0..r {
            out.extend_from_slice(&va[i * na..(i + 1) * na]);
            out.extend_from_slice(&vb[i * nb..(i + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        Ok(self.push(shape, Cow::Owned(out), Op::Concat(a, b)))
    }

    /// Selects columns `start..start + len` of the last dimension.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.check(src)?;
        let s = self.shape(src).to_vec();
        let n = last_dim(&s);
        if s.is_empty() || start + len > n {
            return Err(Error::shape("slice", &s, &[start, len]));
        }
        let r = rows(&s);
        let v = self.value(src);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, Cow::Owned(out), Op::Slice { src, start, len }))
    }

    /// Multiplies `src` element-wise by a constant mask.
    pub fn mask(&mut self, src: Var, mask: Rc<[f64]>) -> Result<Var> {
        self.check(src)?;
        if mask.len() != self.value(src).len() {
            return Err(Error::shape("mask", self.shape(src), &[mask.len()]));
        }
        let out: Vec<f64> = self.value(src).iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let shape = self.shape(src).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mask { src, mask }))
    }

    /// Looks up rows of a `[V, n]` table, producing `[ids.len(), n]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather", &s, &[ids.len()]));
        }
        let (v, n) = (s[0], s[1]);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(&t[id * n..(id + 1) * n]);
        }
        Ok(self.push(
            vec![ids.len(), n],
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks row blocks (`[r_i, n]` or `[n]`) into one `[sum r_i, n]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("stack_rows needs at least one input".into()));
        };
        let n = last_dim(self.shape(first));
        let mut out = Vec::new();
        let mut total = 0;
        for &p in parts {
            self.check(p)?;
            if last_dim(self.shape(p)) != n || self.shape(p).len() > 2 {
                return Err(Error::shape("stack_rows", self.shape(first), self.shape(p)));
            }
            total += rows(self.shape(p));
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![total, n], Cow::Owned(out), Op::StackRows(parts.to_vec())))
    }

    /// Cross-entropy of each row of `logits` against its target id.
    ///
    /// `logits` of shape `[V]` yields a scalar; `[R, V]` yields `[R]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.is_empty() || s.len() > 2 {
            return Err(Error::shape("softmax_cross_entropy", &s, &[targets.len()]));
        }
        let v = last_dim(&s);
        let r = rows(&s);
        if targets.len() != r {
            return Err(Error::shape("softmax_cross_entropy", &s, &[targets.len()]));
        }
        let z = self.value(logits);
        let mut lse = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "target id",
                    index: t,
                    limit: v,
                });
            }
            let row = &z[i * v..(i + 1) * v];
            let l = log_sum_exp(row);
            lse.push(l);
            out.push(l - row[t]);
        }
        let shape = if s.len() == 1 { vec![] } else { vec![r] };
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                lse,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total: f64 = self.value(a).iter().sum();
        Ok(self.push(vec![], Cow::Owned(vec![total]), Op::Sum(a)))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].shape
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = (0..=loss.index).map(|_| None).collect();
        scratch[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = scratch[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut scratch);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.index].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let ws = &self.nodes[w.index].shape;
                let (m, k) = (ws[0], ws[1]);
                let batch = g.len() / m;
                if wants(x) {
                    let wv = self.value(*w);
                    with_grad(scratch, *x, batch * k, |dx| gemm_dy_w(batch, m, k, g, wv, dx));
                }
                if wants(w) {
                    let xv = self.value(*x);
                    with_grad(scratch, *w, m * k, |dw| gemm_dyt_x(batch, m, k, g, xv, dw));
                }
                if wants(b) {
                    with_grad(scratch, *b, m, |db| {
                        for r in 0..batch {
                            db.iter_mut().zip(&g[r * m..(r + 1) * m]).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                with_grad(scratch, *a, g.len(), |da| {
                    for ((d, gi), yi) in da.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                with_grad(scratch, *a, g.len(), |da| {
                    for ((d, gi), yi) in da.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = self.value(*b);
                    with_grad(scratch, *a, g.len(), |da| {
                        da.iter_mut().zip(g).zip(bv).for_each(|((d, gi), v)| *d += gi * v)
                    });
                }
                if wants(b) {
                    let av = self.value(*a);
                    with_grad(scratch, *b, g.len(), |db| {
                        db.iter_mut().zip(g).zip(av).for_each(|((d, gi), v)| *d += gi * v)
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        with_grad(scratch, *v, g.len(), |d| {
                            d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)
                        });
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = last_dim(self.shape(*a));
                let nb = last_dim(self.shape(*b));
                let r = g.len() / (na + nb);
                if wants(a) {
                    with_grad(scratch, *a, r * na, |da| {
                        for i in 0..r {
                            let src = &g[i * (na + nb)..i * (na + nb) + na];
                            da[i * na..(i + 1) * na].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                }
                if wants(b) {
                    with_grad(scratch, *b, r * nb, |db| {
                        for i in 0..r {
                            let src = &g[i * (na + nb) + na..(i + 1) * (na + nb)];
                            db[i * nb..(i + 1) * nb].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Slice { src, start, len } => {
                let n = last_dim(self.shape(*src));
                let r = g.len() / len;
                with_grad(scratch, *src, r * n, |d| {
                    for i in 0..r {
                        d[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Mask { src, mask } => {
                with_grad(scratch, *src, g.len(), |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(mask.iter())
                        .for_each(|((d, gi), m)| *d += gi * m)
                });
            }
            Op::Gather { table, ids } => {
                let s = self.shape(*table);
                let n = s[1];
                with_grad(scratch, *table, s[0] * n, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        d[id * n..(id + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(p) {
                        with_grad(scratch, *p, len, |d| {
                            d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, v)| *d += v)
                        });
                    }
                    offset += len;
                }
            }
            Op::SoftmaxXent { logits, targets, lse } => {
                let v = last_dim(self.shape(*logits));
                let z = self.value(*logits);
                with_grad(scratch, *logits, z.len(), |d| {
                    for (r, (&t, &l)) in targets.iter().zip(lse).enumerate() {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &z[r * v..(r + 1) * v];
                        let dr = &mut d[r * v..(r + 1) * v];
                        for (dj, zj) in dr.iter_mut().zip(row) {
                            *dj += gr * (zj - l).exp();
                        }
                        dr[t] -= gr;
                    }
                });
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                with_grad(scratch, *a, len, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Scale(a, k) => {
                with_grad(scratch, *a, g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * k)
                });
            }
        }
    }

    /// Minimum and maximum number of [`mask`](Tape::mask) nodes on any
    /// recorded path from `from` to `to`, or `None` when `to` does not depend
    /// on `from`.
    pub fn mask_count_range(&self, from: Var, to: Var) -> Result<Option<(u32, u32)>> {
        self.check(from)?;
        self.check(to)?;
        if to.index < from.index {
            return Ok(None);
        }
        let mut range: Vec<Option<(u32, u32)>> = vec![None; to.index - from.index + 1];
        range[0] = Some((0, 0));
        for j in from.index + 1..=to.index {
            let node = &self.nodes[j];
            let bump = u32::from(matches!(node.op, Op::Mask { .. }));
            let mut acc: Option<(u32, u32)> = None;
            for inp in node.op.inputs() {
                if inp.index < from.index {
                    continue;
                }
                if let Some((lo, hi)) = range[inp.index - from.index] {
                    acc = Some(match acc {
                        None => (lo, hi),
                        Some((a, b)) => (a.min(lo), b.max(hi)),
                    });
                }
            }
            range[j - from.index] = acc.map(|(lo, hi)| (lo + bump, hi + bump));
        }
        Ok(range[to.index - from.index])
    }
}

fn with_grad(scratch: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = scratch[v.index].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `max + ln(sum(exp(x - max)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of one row.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// out[batch, m] += x[batch, k] * w[m, k]^T
fn gemm_x_wt(batch: usize, k: usize, m: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), batch * k);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(out.len(), batch * m);
    // SAFETY: slice lengths checked above match the dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            batch,
            k,
            m,
            1.0,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            1.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

// dx[batch, k] += dy[batch, m] * w[m, k]
fn gemm_dy_w(batch: usize, m: usize, k: usize, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), batch * m);
    debug_assert_eq!(dx.len(), batch * k);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            batch,
            m,
            k,
            1.0,
            dy.as_ptr(),
            m as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            1.0,
            dx.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

// dw[m, k] += dy[batch, m]^T * x[batch, k]
fn gemm_dyt_x(batch: usize, m: usize, k: usize, dy: &[f64], x: &[f64], dw: &mut [f64]) {
    debug_assert_eq!(x.len(), batch * k);
    debug_assert_eq!(dw.len(), m * k);
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            batch,
            k,
            1.0,
            dy.as_ptr(),
            1,
            m as isize,
            x.as_ptr(),
            k as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let up = f(&p);
                p[i] = orig - h;
                let down = f(&p);
                p[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn affine_identity_and_hand_values() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::identity(2));
        let b = tape.input(Tensor::zeros(&[2]));
        let x = tape.input(Tensor::vector(vec![3.0, -1.0]));
        let y = tape.affine(w, b, x).unwrap();
        assert_eq!(tape.value(y), &[3.0, -1.0]);

        let w = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.input(Tensor::vector(vec![1.0, 1.0]));
        let x = tape.input(Tensor::vector(vec![1.0, 1.0]));
        let y = tape.affine(w, b, x).unwrap();
        assert_eq!(tape.value(y), &[4.0, 8.0]);
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::zeros(&[3, 2]));
        let b = tape.input(Tensor::zeros(&[3]));
        let x = tape.input(Tensor::zeros(&[4]));
        let err = tape.affine(w, b, x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 2]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let wv = vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9];
        let bv = vec![0.05, -0.3];
        let xv = [[0.5, -1.5, 2.0], [0.1, 0.2, -0.3]].concat();
        let eval = |w: &[f64], b: &[f64], x: &[f64]| {
            let mut t = Tape::new();
            let w = t.input(Tensor::new(&[2, 3], w.to_vec()).unwrap());
            let b = t.input(Tensor::vector(b.to_vec()));
            let x = t.input(Tensor::new(&[2, 3], x.to_vec()).unwrap());
            let y = t.affine(w, b, x).unwrap();
            // Square so the derivative depends on x (sum alone would be linear).
            let y2 = t.mul(y, y).unwrap();
            let s = t.sum(y2).unwrap();
            t.scalar(s)
        };
        let mut tape = Tape::new();
        let w = tape.input(Tensor::new(&[2, 3], wv.clone()).unwrap().with_grad());
        let b = tape.input(Tensor::vector(bv.clone()).with_grad());
        let x = tape.input(Tensor::new(&[2, 3], xv.clone()).unwrap().with_grad());
        let y = tape.affine(w, b, x).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let s = tape.sum(y2).unwrap();
        tape.backward(s).unwrap();

        let nw = numeric_grad(&wv, |p| eval(p, &bv, &xv));
        let nb = numeric_grad(&bv, |p| eval(&wv, p, &xv));
        let nx = numeric_grad(&xv, |p| eval(&wv, &bv, p));
        for (analytic, numeric) in [(tape.grad(w), nw), (tape.grad(b), nb), (tape.grad(x), nx)] {
            for (a, f) in analytic.unwrap().iter().zip(&numeric) {
                assert!(rel_err(*a, *f) < 1e-6, "{a} vs {f}");
            }
        }
    }

    #[test]
    fn sum_of_affine_bias_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
        let b = tape.input(Tensor::zeros(&[3]).with_grad());
        let x = tape.input(Tensor::vector(vec![2.0, 5.0]));
        let y = tape.affine(w, b, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::vector(vec![0.0]));
        let s = tape.sigmoid(z).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
        assert_eq!(tape.value(t), &[0.0]);
        let a = tape.input(Tensor::vector(vec![2.0, 3.0]));
        let b = tape.input(Tensor::vector(vec![4.0, 5.0]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m), &[8.0, 15.0]);
        let c = tape.input(Tensor::vector(vec![1.0]));
        assert!(matches!(tape.mul(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_orders_and_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let b = tape.input(Tensor::vector(vec![3.0, 4.0]).with_grad());
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let back_a = tape.slice(c, 0, 2).unwrap();
        let back_b = tape.slice(c, 2, 2).unwrap();
        assert_eq!(tape.value(back_a), &[1.0, 2.0]);
        assert_eq!(tape.value(back_b), &[3.0, 4.0]);

        let weights = tape.input(Tensor::vector(vec![10.0, 20.0, 30.0, 40.0]));
        let prod = tape.mul(c, weights).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[10.0, 20.0]);
        assert_eq!(tape.grad(b).unwrap(), &[30.0, 40.0]);

        let short = tape.input(Tensor::vector(vec![1.0]));
        let wide = tape.input(Tensor::zeros(&[2, 2]));
        assert!(tape.concat(short, wide).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::vector(vec![0.7; 10]));
        let l = tape.softmax_cross_entropy(z, &[3]).unwrap();
        assert!((tape.scalar(l) - 10f64.ln()).abs() < 1e-12);

        let z = tape.input(Tensor::vector(vec![1000.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.scalar(l).is_finite() && tape.scalar(l) < 1e-300);

        assert!(matches!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(Error::Index { index: 2, limit: 2, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let zv = vec![0.2, -1.3, 0.8, 2.1, -0.4, 0.0, 0.6, -2.2];
        let targets = [2, 0];
        let eval = |z: &[f64]| {
            let mut t = Tape::new();
            let z = t.input(Tensor::new(&[2, 4], z.to_vec()).unwrap());
            let l = t.softmax_cross_entropy(z, &targets).unwrap();
            let s = t.sum(l).unwrap();
            t.scalar(s)
        };
        let mut tape = Tape::new();
        let z = tape.input(Tensor::new(&[2, 4], zv.clone()).unwrap().with_grad());
        let l = tape.softmax_cross_entropy(z, &targets).unwrap();
        let s = tape.sum(l).unwrap();
        tape.backward(s).unwrap();
        let num = numeric_grad(&zv, eval);
        for (a, f) in tape.grad(z).unwrap().iter().zip(&num) {
            assert!(rel_err(*a, *f) < 1e-6, "{a} vs {f}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[3.0, -1.0, 0.5, 700.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_and_rejects_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);

        let mut other = Tape::new();
        let y = other.input(Tensor::vector(vec![1.0]));
        let ys = other.sum(y).unwrap();
        assert!(matches!(tape.backward(ys), Err(Error::Usage(_))));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, -2.0]).with_grad());
        let t = tape.tanh(x).unwrap();
        let z = tape.scale(t, 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn gather_scatters_gradient_rows() {
        let table = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .with_grad();
        let mut tape = Tape::new();
        let t = tape.leaf(&table);
        let rows = tape.gather(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(rows).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(tape.gather(t, &[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn mask_count_range_counts_masks_on_paths() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 1.0]));
        let ones: Rc<[f64]> = Rc::from(vec![1.0, 1.0]);
        let m1 = tape.mask(x, ones.clone()).unwrap();
        let m2 = tape.mask(m1, ones.clone()).unwrap();
        // Two paths into `y`: one with two masks, one with none.
        let y = tape.add(m2, x).unwrap();
        assert_eq!(tape.mask_count_range(x, y).unwrap(), Some((0, 2)));
        assert_eq!(tape.mask_count_range(x, m2).unwrap(), Some((2, 2)));
        let unrelated = tape.input(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(tape.mask_count_range(unrelated, y).unwrap(), None);
    }

    #[test]
    fn stack_rows_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap().with_grad());
        let b = tape.input(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap().with_grad());
        let s = tape.stack_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(s), &[3, 2]);
        let w = tape.input(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = tape.mul(s, w).unwrap();
        let total = tape.sum(p).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
        assert!(close(tape.value(s), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.0));
    }
}
