//! Masked softmax attention with boolean masks.
//!
//! A mask is a dense boolean grid ([`MaskGrid`]); forbidden pairs are excluded
//! from the softmax entirely rather than receiving an additive bias. For
//! compute the grid is compressed to per-query lists of allowed keys
//! ([`AttnMask`]), so the cost of one attention call scales with the number of
//! allowed pairs.

use super::kernels::{axpy, dot};
use super::Tensor;
use crate::error::{config_err, dim_err, Result};

/// Dense `queries × keys` boolean grid; `true` means the pair may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    n_q: usize,
    n_k: usize,
    allowed: Vec<bool>,
}

impl MaskGrid {
    pub fn new(n_q: usize, n_k: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n_q * n_k {
            return Err(dim_err!(
                "mask of {}x{} needs {} entries, got {}",
                n_q,
                n_k,
                n_q * n_k,
                allowed.len()
            ));
        }
        Ok(Self { n_q, n_k, allowed })
    }

    pub fn full(n_q: usize, n_k: usize) -> Self {
        Self {
            n_q,
            n_k,
            allowed: vec![true; n_q * n_k],
        }
    }

    pub fn from_fn(n_q: usize, n_k: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q {
            for j in 0..n_k {
                allowed.push(f(i, j));
            }
        }
        Self { n_q, n_k, allowed }
    }

    pub fn n_queries(&self) -> usize {
        self.n_q
    }

    pub fn n_keys(&self) -> usize {
        self.n_k
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n_k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.allowed[i * self.n_k + j] = v;
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Compressed-row form of a [`MaskGrid`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    n_q: usize,
    n_k: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl AttnMask {
    /// Fails when a query row has no allowed key: such a row has no
    /// well-defined softmax.
    pub fn from_grid(grid: &MaskGrid) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(grid.n_q + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for i in 0..grid.n_q {
            let start = cols.len();
            cols.extend((0..grid.n_k).filter(|&j| grid.get(i, j)));
            if cols.len() == start {
                return Err(config_err!("attention mask row {i} has every key masked"));
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            n_q: grid.n_q,
            n_k: grid.n_k,
            row_ptr,
            cols,
        })
    }

    pub fn full(n_q: usize, n_k: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n_q + 1);
        let mut cols = Vec::with_capacity(n_q * n_k);
        row_ptr.push(0);
        for _ in 0..n_q {
            cols.extend(0..n_k);
            row_ptr.push(cols.len());
        }
        Self {
            n_q,
            n_k,
            row_ptr,
            cols,
        }
    }

    /// Block-diagonal replication for `copies` independent sequences stacked
    /// along the row axis.
    pub fn repeat_block_diagonal(&self, copies: usize) -> Self {
        let nnz = self.cols.len();
        let mut row_ptr = Vec::with_capacity(self.n_q * copies + 1);
        let mut cols = Vec::with_capacity(nnz * copies);
        row_ptr.push(0);
        for c in 0..copies {
            let off = c * self.n_k;
            for i in 0..self.n_q {
                let r = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
                cols.extend(r.iter().map(|&j| j + off));
                row_ptr.push(cols.len());
            }
        }
        Self {
            n_q: self.n_q * copies,
            n_k: self.n_k * copies,
            row_ptr,
            cols,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_q
    }

    pub fn n_keys(&self) -> usize {
        self.n_k
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }
}

/// Multi-head forward. Returns the output and the attention weights laid out
/// as `heads × nnz` in mask order.
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    heads: usize,
    mask: &AttnMask,
) -> (Vec<f64>, Vec<f64>) {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nnz = mask.nnz();
    let mut out = vec![0.0; mask.n_q * width];
    let mut probs = vec![0.0; heads * nnz];
    for h in 0..heads {
        let ho = h * dh;
        for i in 0..mask.n_q {
            let (lo, hi) = (mask.row_ptr[i], mask.row_ptr[i + 1]);
            let qi = &q[i * width + ho..i * width + ho + dh];
            let p = &mut probs[h * nnz + lo..h * nnz + hi];
            let mut max = f64::NEG_INFINITY;
            for (e, &j) in mask.cols[lo..hi].iter().enumerate() {
                let s = dot(qi, &k[j * width + ho..j * width + ho + dh]) * scale;
                p[e] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for pe in p.iter_mut() {
                *pe = (*pe - max).exp();
                z += *pe;
            }
            let oi = &mut out[i * width + ho..i * width + ho + dh];
            for (e, &j) in mask.cols[lo..hi].iter().enumerate() {
                p[e] /= z;
                axpy(p[e], &v[j * width + ho..j * width + ho + dh], oi);
            }
        }
    }
    (out, probs)
}

pub(crate) struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    width: usize,
    heads: usize,
    mask: &AttnMask,
) -> AttnGrads {
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nnz = mask.nnz();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = Vec::new();
    for h in 0..heads {
        let ho = h * dh;
        for i in 0..mask.n_q {
            let (lo, hi) = (mask.row_ptr[i], mask.row_ptr[i + 1]);
            let p = &probs[h * nnz + lo..h * nnz + hi];
            let doi = &dout[i * width + ho..i * width + ho + dh];
            dp.clear();
            let mut weighted = 0.0;
            for (e, &j) in mask.cols[lo..hi].iter().enumerate() {
                let d = dot(doi, &v[j * width + ho..j * width + ho + dh]);
                weighted += p[e] * d;
                dp.push(d);
                axpy(p[e], doi, &mut dv[j * width + ho..j * width + ho + dh]);
            }
            let qi = &q[i * width + ho..i * width + ho + dh];
            for (e, &j) in mask.cols[lo..hi].iter().enumerate() {
                let ds = p[e] * (dp[e] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                axpy(
                    ds,
                    &k[j * width + ho..j * width + ho + dh],
                    &mut dq[i * width + ho..i * width + ho + dh],
                );
                axpy(ds, qi, &mut dk[j * width + ho..j * width + ho + dh]);
            }
        }
    }
    AttnGrads { dq, dk, dv }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, mask: &MaskGrid) -> Result<()> {
    if q.cols() != k.cols() || k.cols() != v.cols() {
        return Err(dim_err!(
            "q/k/v widths differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if k.rows() != v.rows() {
        return Err(dim_err!("k has {} rows, v has {}", k.rows(), v.rows()));
    }
    if mask.n_queries() != q.rows() || mask.n_keys() != k.rows() {
        return Err(dim_err!(
            "mask {}x{} does not match {} queries x {} keys",
            mask.n_queries(),
            mask.n_keys(),
            q.rows(),
            k.rows()
        ));
    }
    Ok(())
}

/// Single-head masked softmax attention on plain tensors.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &MaskGrid) -> Result<Tensor> {
    check_qkv(q, k, v, mask)?;
    let sparse = AttnMask::from_grid(mask)?;
    let (out, _) = forward(q.data(), k.data(), v.data(), q.cols(), 1, &sparse);
    Tensor::matrix(q.rows(), q.cols(), out)
}

/// Attention weights (`queries × keys`, zero where masked) for inspection.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: &MaskGrid) -> Result<Tensor> {
    check_qkv(q, k, k, mask)?;
    let sparse = AttnMask::from_grid(mask)?;
    let (_, probs) = forward(q.data(), k.data(), k.data(), q.cols(), 1, &sparse);
    let mut w = Tensor::zeros(&[q.rows(), k.rows()]);
    let n_k = k.rows();
    for i in 0..q.rows() {
        for (e, &j) in sparse.row(i).iter().enumerate() {
            w.data_mut()[i * n_k + j] = probs[sparse.row_ptr[i] + e];
        }
    }
    Ok(w)
}
