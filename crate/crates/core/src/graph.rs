//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node whose inputs already exist, so the node order is a topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients are
//! kept for leaves created with `requires_grad`; they accumulate across
//! repeated `backward` calls until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Gelu(usize),
    Log(usize),
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        outer: usize,
        n: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Transpose(usize),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// How the smaller operand of a binary op repeats over the larger one.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` is a trailing-shape suffix of `a` and repeats over it.
    RepeatB,
    /// `a` is a trailing-shape suffix of `b`.
    RepeatA,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::Same))
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok((a.to_vec(), Broadcast::RepeatB))
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok((b.to_vec(), Broadcast::RepeatA))
    } else {
        Err(Error::InvalidShape(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`;
/// either may be stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the logical dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Add `src` into `dst`, summing repeats when `dst` is the smaller operand.
fn add_reduced(dst: &mut [f64], src: &[f64], scale: f64) {
    if dst.len() == src.len() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    } else {
        for chunk in src.chunks_exact(dst.len()) {
            for (d, s) in dst.iter_mut().zip(chunk) {
                *d += scale * s;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Add a leaf tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).dims2()?;
        let (k2, n) = self.val(b).dims2()?;
        if k != k2 {
            return Err(Error::InvalidShape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (shape, mode) = broadcast(self.val(a).shape(), self.val(b).shape())?;
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let data: Vec<f64> = match mode {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RepeatB => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % bd.len()]))
                .collect(),
            Broadcast::RepeatA => bd
                .iter()
                .enumerate()
                .map(|(i, &y)| f(ad[i % ad.len()], y))
                .collect(),
        };
        Ok((Tensor::new(shape, data)?, self.rg(a.0) || self.rg(b.0)))
    }

    /// Elementwise sum; the lower-rank operand broadcasts over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.val(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())
            .expect("shape preserved");
        let rg = self.rg(a.0);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.val(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        let rg = self.rg(a.0);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a.0), gelu)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.val(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::InvalidInput(format!("log of non-positive value {v}")));
        }
        Ok(self.unary(a, Op::Log(a.0), f64::ln))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.val(a);
        let (outer, n, inner) = axis_split(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| xd[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (xd[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Softmax { x: a.0, outer, n, inner }, rg))
    }

    /// Normalize along `axis`, then apply per-feature `gain` and `bias`
    /// (both of length `shape[axis]`).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidInput(format!("layernorm eps must be positive, got {eps}")));
        }
        let xt = self.val(x);
        let (outer, n, inner) = axis_split(xt.shape(), axis)?;
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        if g.len() != n || b.len() != n {
            return Err(Error::InvalidShape(format!(
                "layernorm gain/bias length {}/{} for axis of size {n}",
                g.len(),
                b.len()
            )));
        }
        let xd = xt.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| xd[at(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (xd[at(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + j] = inv;
                for i in 0..n {
                    let h = (xd[at(i)] - mean) * inv;
                    xhat[at(i)] = h;
                    out[at(i)] = h * g[i] + b[i];
                }
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                outer,
                n,
                inner,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows of a `[vocab, dim]` table selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.val(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::InvalidShape("embedding lookup with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::InvalidInput(format!("id {id} out of range for table of {vocab}")));
            }
            out.extend_from_slice(self.val(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.rg(table.0);
        Ok(self.push(t, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[rows, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::InvalidInput("cross_entropy with no targets".into()));
        }
        let w = vec![1.0 / targets.len() as f64; targets.len()];
        self.cross_entropy_weighted(logits, targets, &w)
    }

    /// `Σ_r weights[r] · nll_r` over the rows of `logits`.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, classes) = self.val(logits).dims2()?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::InvalidShape(format!(
                "{rows} logit rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidInput(format!("target {t} out of range for {classes} classes")));
        }
        let ld = self.val(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + total.ln();
            for (p, z) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.val(a).dims2()?;
        let d = self.val(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a.0), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.val(a).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::InvalidShape(format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.val(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x: a.0, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.val(a).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape(format!("cols {start}..{} of {c}", start + len)));
        }
        let d = self.val(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x: a.0, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let (_, c) = self.val(*first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c2) = self.val(*p).dims2()?;
            if c2 != c {
                return Err(Error::InvalidShape(format!("concat_rows width {c2} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.val(*p).data());
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let (r, _) = self.val(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r2, c) = self.val(*p).dims2()?;
            if r2 != r {
                return Err(Error::InvalidShape(format!("concat_cols height {r2} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.val(*p).row(i));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(ids), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.val(a).dims2()?;
        if rows.is_empty() {
            return Err(Error::InvalidShape("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::InvalidInput(format!("row {i} out of range for {r}")));
            }
            out.extend_from_slice(self.val(a).row(i));
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows { x: a.0, rows: rows.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Propagate `d loss / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let len = |v: usize| nodes[v].value.len();
        let rg = |v: usize| nodes[v].requires_grad;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a].value.dims2().unwrap();
                let n = nodes[b].value.dims2().unwrap().1;
                if rg(a) {
                    let dst = accumulate(&mut grads[a], m * k);
                    gemm(m, n, k, g, false, nodes[b].value.data(), true, 1.0, dst);
                }
                if rg(b) {
                    let dst = accumulate(&mut grads[b], k * n);
                    gemm(k, m, n, nodes[a].value.data(), true, g, false, 1.0, dst);
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    add_reduced(accumulate(&mut grads[a], len(a)), g, 1.0);
                }
                if rg(b) {
                    add_reduced(accumulate(&mut grads[b], len(b)), g, sign);
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
                for (x, other, xd) in [(a, bd, ad), (b, ad, bd)] {
                    if !rg(x) {
                        continue;
                    }
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gj)| gj * other[j % other.len()])
                        .collect();
                    add_reduced(accumulate(&mut grads[x], xd.len()), &prod, 1.0);
                }
            }
            &Op::Scale(a, c) => {
                if rg(a) {
                    add_reduced(accumulate(&mut grads[a], len(a)), g, c);
                }
            }
            &Op::Relu(a) => {
                if rg(a) {
                    let xd = nodes[a].value.data();
                    let dst = accumulate(&mut grads[a], xd.len());
                    for ((d, gj), x) in dst.iter_mut().zip(g).zip(xd) {
                        if *x > 0.0 {
                            *d += gj;
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if rg(a) {
                    let xd = nodes[a].value.data();
                    let dst = accumulate(&mut grads[a], xd.len());
                    for ((d, gj), &x) in dst.iter_mut().zip(g).zip(xd) {
                        *d += gj * gelu_grad(x);
                    }
                }
            }
            &Op::Log(a) => {
                if rg(a) {
                    let xd = nodes[a].value.data();
                    let dst = accumulate(&mut grads[a], xd.len());
                    for ((d, gj), &x) in dst.iter_mut().zip(g).zip(xd) {
                        *d += gj / x;
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                if rg(x) {
                    let y = out.data();
                    let dst = accumulate(&mut grads[x], y.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + j;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                dst[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                outer,
                n,
                inner,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias, outer, n, inner) = (*x, *gain, *bias, *outer, *n, *inner);
                let gd = nodes[gain].value.data();
                if rg(gain) {
                    let dst = accumulate(&mut grads[gain], n);
                    for (idx, gj) in g.iter().enumerate() {
                        dst[(idx / inner) % n] += gj * xhat[idx];
                    }
                }
                if rg(bias) {
                    let dst = accumulate(&mut grads[bias], n);
                    for (idx, gj) in g.iter().enumerate() {
                        dst[(idx / inner) % n] += gj;
                    }
                }
                if rg(x) {
                    let dst = accumulate(&mut grads[x], xhat.len());
                    let mut dxhat = vec![0.0; n];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + j;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for k in 0..n {
                                dxhat[k] = g[at(k)] * gd[k];
                                mean_d += dxhat[k];
                                mean_dx += dxhat[k] * xhat[at(k)];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            let inv = inv_std[o * inner + j];
                            for k in 0..n {
                                dst[at(k)] += inv * (dxhat[k] - mean_d - xhat[at(k)] * mean_dx);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if rg(table) {
                    let dim = nodes[table].value.dims2().unwrap().1;
                    let dst = accumulate(&mut grads[table], len(table));
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, gj) in dst[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *d += gj;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let logits = *logits;
                if rg(logits) {
                    let classes = nodes[logits].value.dims2().unwrap().1;
                    let dst = accumulate(&mut grads[logits], probs.len());
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let scale = g[0] * w;
                        let row = &mut dst[r * classes..(r + 1) * classes];
                        for (d, p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            &Op::Transpose(a) => {
                if rg(a) {
                    let (r, c) = nodes[a].value.dims2().unwrap();
                    let dst = accumulate(&mut grads[a], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if rg(x) {
                    let c = nodes[x].value.dims2().unwrap().1;
                    let dst = accumulate(&mut grads[x], len(x));
                    for (d, gj) in dst[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *d += gj;
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if rg(x) {
                    let c = nodes[x].value.dims2().unwrap().1;
                    let w = out.dims2().unwrap().1;
                    let dst = accumulate(&mut grads[x], len(x));
                    for (r, grow) in g.chunks_exact(w).enumerate() {
                        for (d, gj) in dst[r * c + start..r * c + start + w].iter_mut().zip(grow) {
                            *d += gj;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if rg(p) {
                        add_reduced(accumulate(&mut grads[p], n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.dims2().unwrap().1;
                let mut col = 0;
                for &p in parts {
                    let (r, w) = nodes[p].value.dims2().unwrap();
                    if rg(p) {
                        let dst = accumulate(&mut grads[p], r * w);
                        for i in 0..r {
                            for (d, gj) in dst[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + col..i * total + col + w])
                            {
                                *d += gj;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                if rg(x) {
                    let c = nodes[x].value.dims2().unwrap().1;
                    let dst = accumulate(&mut grads[x], len(x));
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, gj) in dst[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *d += gj;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if rg(a) {
                    let dst = accumulate(&mut grads[a], len(a));
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn softmax_normalizes_and_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1e3, -1e3, 999.0, 0.5]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn layernorm_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1e3, -1e3, 5e2], &[7.0, 7.0, 7.0]]));
        let gain = g.constant(Tensor::full(&[3], 1.0).unwrap());
        let bias = g.constant(Tensor::zeros(&[3]).unwrap());
        let y = g.layernorm(x, gain, bias, 1, 1e-5).unwrap();
        assert!(g.value(y).all_finite());
        // constant row normalizes to zero
        assert!(g.value(y).row(1).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_v() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[3, 60], 0.25).unwrap());
        let ce = g.cross_entropy(logits, &[0, 17, 59]).unwrap();
        assert!((g.value(ce).item().unwrap() - 60f64.ln()).abs() < 1e-12);
        assert!((60f64.ln() - 4.0943).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 5]).unwrap());
        assert!(matches!(g.cross_entropy(logits, &[5]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn embedding_id_out_of_range() {
        let mut g = Graph::new();
        let table = g.param(Tensor::zeros(&[4, 2]).unwrap());
        assert!(matches!(g.embedding(table, &[1, 4]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let zero = g.scale(x, 0.0);
        let c = g.constant(Tensor::scalar(3.0));
        let s = g.sum(zero);
        let loss = g.add(s, c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn broadcast_add_over_leading_dims() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3, 2]).unwrap());
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
        let bad = g.param(Tensor::zeros(&[3]).unwrap());
        assert!(g.add(x, bad).is_err());
    }
}
