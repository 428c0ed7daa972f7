//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in creation order.
//! Because nodes can only reference earlier nodes, the tape is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.
//! All tensors are treated as matrices (`rows × cols`); 1-D tensors are a
//! single row.

use std::rc::Rc;

use super::attention::{self, AttnMask};
use super::kernels::{self, matmul_nn, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    RmsNorm { x: Var, gain: Var, scale: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttnMask> },
    GatherRows(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Rc<Tensor>),
    KlDiag(Var, Var),
    CrossEntropy(Var, Rc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    aux: Vec<f64>,
}

/// Handles for every parameter of one [`ParamStore`] inside a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    /// Handles in store order, e.g. with one parameter swapped for a probe input.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Insert every tensor of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .iter()
            .map(|(_, t)| self.leaf(t.clone(), trainable))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(dim_err!(
                "matmul {:?} x {:?}: inner dimensions disagree",
                ta.shape(),
                tb.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, Vec::new()))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(dim_err!("row broadcast {:?} over {:?}", tr.shape(), ta.shape()));
        }
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                if mul {
                    *o *= r;
                } else {
                    *o += r;
                }
            }
        }
        let rg = self.rg(a) || self.rg(row);
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(out, op, rg, Vec::new()))
    }

    /// `a (r×c) + row (c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// `a (r×c) ⊙ row (c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg, Vec::new())
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg, Vec::new())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg, Vec::new())
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::silu);
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg, Vec::new())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg, Vec::new())
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg, Vec::new())
    }

    /// `scale ⊙ gain ⊙ x / sqrt(mean(x²) + eps)` per row. `gain` has one entry
    /// per channel; `scale` is either one row broadcast over all rows or a full
    /// `rows × channels` matrix.
    pub fn rms_norm(&mut self, x: Var, gain: Var, scale: Var, eps: f64) -> Result<Var> {
        let (tx, tg, ts) = (self.value(x), self.value(gain), self.value(scale));
        let (r, c) = (tx.rows(), tx.cols());
        if tg.len() != c {
            return Err(dim_err!("rms_norm gain {:?} for input {:?}", tg.shape(), tx.shape()));
        }
        if ts.len() != c && ts.len() != r * c {
            return Err(dim_err!("rms_norm scale {:?} for input {:?}", ts.shape(), tx.shape()));
        }
        let s_stride = if ts.len() == r * c { c } else { 0 };
        let mut out = vec![0.0; r * c];
        let mut inv = vec![0.0; r];
        for i in 0..r {
            let xr = &tx.data()[i * c..(i + 1) * c];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let iv = 1.0 / (ms + eps).sqrt();
            inv[i] = iv;
            let sr = &ts.data()[i * s_stride..i * s_stride + c];
            for j in 0..c {
                out[i * c + j] = sr[j] * tg.data()[j] * xr[j] * iv;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(scale);
        Ok(self.push(
            Tensor::from_parts(tx.shape().to_vec(), out),
            Op::RmsNorm { x, gain, scale },
            rg,
            inv,
        ))
    }

    /// Multi-head attention over row-stacked tokens. `q` is `n_q × width`,
    /// `k`/`v` are `n_k × width`; heads split the width evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttnMask>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let width = tq.cols();
        if tk.cols() != width || tv.cols() != width || width % heads != 0 {
            return Err(dim_err!(
                "attention widths q {:?} k {:?} v {:?} with {heads} heads",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ));
        }
        if mask.n_queries() != tq.rows() || mask.n_keys() != tk.rows() || tk.rows() != tv.rows() {
            return Err(dim_err!(
                "attention mask {}x{} for q {:?} k {:?}",
                mask.n_queries(),
                mask.n_keys(),
                tq.shape(),
                tk.shape()
            ));
        }
        let (out, probs) = attention::forward(tq.data(), tk.data(), tv.data(), width, heads, &mask);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let n_q = tq.rows();
        Ok(self.push(
            Tensor::from_parts(vec![n_q, width], out),
            Op::Attention { q, k, v, heads, mask },
            rg,
            probs,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(dim_err!("gather row {i} out of {r}"));
            }
            out.extend_from_slice(ta.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(a, idx),
            rg,
            Vec::new(),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(dim_err!("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
            Vec::new(),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start >= end || end > c {
            return Err(dim_err!("slice_cols {start}..{end} of {c}"));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&ta.row(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![r, w], out),
            Op::SliceCols(a, start, end),
            rg,
            Vec::new(),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg, Vec::new()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, Vec::new())
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: Rc<Tensor>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != target.len() {
            return Err(dim_err!("mse {:?} vs target {:?}", ta.shape(), target.shape()));
        }
        let n = ta.len() as f64;
        let s = ta
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, target), rg, Vec::new()))
    }

    /// `½ Σ_c (exp(logvar) + mean² − 1 − logvar)`, averaged over rows (tokens).
    pub fn kl_diag(&mut self, mean: Var, logvar: Var) -> Result<Var> {
        let (tm, tl) = (self.value(mean), self.value(logvar));
        same_shape(tm, tl, "kl_diag")?;
        let rows = tm.rows() as f64;
        let s = tm
            .data()
            .iter()
            .zip(tl.data())
            .map(|(m, l)| l.exp() + m * m - 1.0 - l)
            .sum::<f64>()
            * 0.5
            / rows;
        let rg = self.rg(mean) || self.rg(logvar);
        Ok(self.push(Tensor::scalar(s), Op::KlDiag(mean, logvar), rg, Vec::new()))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(dim_err!("cross_entropy labels for logits {:?}", tl.shape()));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = tl.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            loss -= row[labels[i]] - m - z.ln();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / r as f64),
            Op::CrossEntropy(logits, labels),
            rg,
            probs,
        ))
    }

    /// Reverse sweep from a scalar `out`. Gradients stay available through
    /// [`Graph::grad`] until the next call.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(dim_err!("backward from non-scalar {:?}", self.value(out).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    /// Gradients for every parameter of a binding, in store order.
    pub fn grads(&self, bound: &Bound) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|&v| self.grad(v)).collect()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| matmul_nt(g, tb.data(), ga, m, k, n));
                acc(*b, &mut |gb| matmul_tn(ta.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(*b, &mut |gb| kernels::axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(*b, &mut |gb| kernels::axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = val(*row).len();
                acc(*a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(c) {
                        kernels::axpy(1.0, chunk, gr);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                let c = tr.len();
                acc(*a, &mut |ga| {
                    for (gchunk, ochunk) in g.chunks(c).zip(ga.chunks_mut(c)) {
                        for ((o, &gv), &rv) in ochunk.iter_mut().zip(gchunk).zip(tr.data()) {
                            *o += gv * rv;
                        }
                    }
                });
                acc(*row, &mut |gr| {
                    for (gchunk, achunk) in g.chunks(c).zip(ta.data().chunks(c)) {
                        for ((o, &gv), &av) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *o += gv * av;
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| kernels::axpy(*s, g, ga)),
            Op::AddScalar(a) => acc(*a, &mut |ga| kernels::axpy(1.0, g, ga)),
            Op::Gelu(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * kernels::gelu_grad(x);
                    }
                });
            }
            Op::Silu(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *o += gv * kernels::silu_grad(x);
                    }
                });
            }
            Op::Exp(_) | Op::Clamp(..) | Op::Reshape(_) => self.backprop_pointwise(node, g, &mut acc),
            Op::RmsNorm { x, gain, scale } => {
                let (tx, tg, ts) = (val(*x), val(*gain), val(*scale));
                let (r, c) = (tx.rows(), tx.cols());
                let s_stride = if ts.len() == r * c { c } else { 0 };
                let inv = &node.aux;
                if rg(*x) {
                    acc(*x, &mut |gx| {
                        for row in 0..r {
                            let xr = &tx.data()[row * c..(row + 1) * c];
                            let gr = &g[row * c..(row + 1) * c];
                            let sr = &ts.data()[row * s_stride..row * s_stride + c];
                            let iv = inv[row];
                            let mut t = 0.0;
                            for j in 0..c {
                                t += sr[j] * tg.data()[j] * gr[j] * xr[j];
                            }
                            let coef = iv * iv * iv * t / c as f64;
                            for j in 0..c {
                                gx[row * c + j] += iv * sr[j] * tg.data()[j] * gr[j] - coef * xr[j];
                            }
                        }
                    });
                }
                acc(*gain, &mut |gg| {
                    for row in 0..r {
                        let iv = inv[row];
                        for j in 0..c {
                            gg[j] += g[row * c + j] * ts.data()[row * s_stride + j] * tx.data()[row * c + j] * iv;
                        }
                    }
                });
                acc(*scale, &mut |gs| {
                    for row in 0..r {
                        let iv = inv[row];
                        for j in 0..c {
                            gs[row * s_stride + j] += g[row * c + j] * tg.data()[j] * tx.data()[row * c + j] * iv;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, mask } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let ag = attention::backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    &node.aux,
                    g,
                    tq.cols(),
                    *heads,
                    mask,
                );
                acc(*q, &mut |o| kernels::axpy(1.0, &ag.dq, o));
                acc(*k, &mut |o| kernels::axpy(1.0, &ag.dk, o));
                acc(*v, &mut |o| kernels::axpy(1.0, &ag.dv, o));
            }
            Op::GatherRows(a, idx) => {
                let c = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut ga[src * c..(src + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |gp| kernels::axpy(1.0, &g[off..off + n], gp));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, &mut |gp| {
                        for i in 0..r {
                            kernels::axpy(1.0, &g[i * total + off..i * total + off + c], &mut gp[i * c..(i + 1) * c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = val(*a).cols();
                let w = end - start;
                acc(*a, &mut |ga| {
                    for (i, gchunk) in g.chunks(w).enumerate() {
                        kernels::axpy(1.0, gchunk, &mut ga[i * c + start..i * c + end]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Mse(a, target) => {
                let ta = val(*a);
                let n = ta.len() as f64;
                acc(*a, &mut |ga| {
                    for ((o, &x), &t) in ga.iter_mut().zip(ta.data()).zip(target.data()) {
                        *o += g[0] * 2.0 * (x - t) / n;
                    }
                });
            }
            Op::KlDiag(m, l) => {
                let (tm, tl) = (val(*m), val(*l));
                let rows = tm.rows() as f64;
                acc(*m, &mut |gm| {
                    for (o, &x) in gm.iter_mut().zip(tm.data()) {
                        *o += g[0] * x / rows;
                    }
                });
                acc(*l, &mut |gl| {
                    for (o, &x) in gl.iter_mut().zip(tl.data()) {
                        *o += g[0] * 0.5 * (x.exp() - 1.0) / rows;
                    }
                });
            }
            Op::CrossEntropy(logits, labels) => {
                let c = val(*logits).cols();
                let r = labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == lab { 1.0 } else { 0.0 };
                            gl[i * c + j] += g[0] * (node.aux[i * c + j] - onehot) / r;
                        }
                    }
                });
            }
        }
    }

    fn backprop_pointwise(&self, node: &Node, g: &[f64], acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64]))) {
        match node.op {
            Op::Exp(a) => acc(a, &mut |ga| {
                for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *o += gv * y;
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let ta = &self.nodes[a.0].value;
                acc(a, &mut |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if x >= lo && x <= hi {
                            *o += gv;
                        }
                    }
                })
            }
            Op::Reshape(a) => acc(a, &mut |ga| kernels::axpy(1.0, g, ga)),
            _ => unreachable!(),
        }
    }
}
