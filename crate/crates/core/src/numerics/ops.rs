use crate::error::{Error, Result};

use super::Tensor;

fn check_2d(t: &Tensor, name: &str) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::shape(format!(
            "{name} must be 2-D, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `a[m,k] · b[k,n]`, summing sequentially over `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_2d(a, "matmul lhs")?;
    check_2d(b, "matmul rhs")?;
    if a.cols() != b.rows() {
        return Err(Error::shape(format!(
            "matmul inner dims {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(matmul_unchecked(a, b))
}

pub(crate) fn matmul_unchecked(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// `a[m,k] · b[n,k]ᵀ`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(k, b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            let mut s = 0.0;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul_nt shape")
}

/// `a[k,m]ᵀ · b[k,n]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for i in 0..m {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul_tn shape")
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for {:?}",
            shape
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |t: usize| base + t * inner;
            let max = (0..len).map(|t| d[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (d[idx(t)] - max).exp();
                d[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                d[idx(t)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax of a 2-D tensor, in place.
pub(crate) fn softmax_rows_inplace(x: &mut Tensor) {
    let c = x.cols();
    for row in x.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Boolean attention mask `[queries, keys]`; `true` means the pair may attend.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Same key mask repeated for every query row.
    pub fn broadcast(rows: usize, key_allowed: &[bool]) -> Self {
        let cols = key_allowed.len();
        let mut allowed = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            allowed.extend_from_slice(key_allowed);
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// Attention probabilities `softmax(q·kᵀ/√C + maskbias)`.
///
/// A query whose mask row allows no key attends to every key instead.
pub fn attention_probs(q: &Tensor, k: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    check_2d(q, "attention q")?;
    check_2d(k, "attention k")?;
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "attention feature dims {:?} vs {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if let Some(m) = mask {
        if m.rows() != q.rows() || m.cols() != k.rows() {
            return Err(Error::shape(format!(
                "attention mask {}x{} for {}x{} scores",
                m.rows(),
                m.cols(),
                q.rows(),
                k.rows()
            )));
        }
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul_nt(q, k);
    let nk = k.rows();
    for i in 0..q.rows() {
        let row = scores.row_mut(i);
        let allowed = mask.map(|m| m.row(i)).filter(|r| r.iter().any(|&a| a));
        let mut max = f64::NEG_INFINITY;
        for j in 0..nk {
            row[j] *= scale;
            if allowed.map_or(true, |a| a[j]) {
                max = max.max(row[j]);
            }
        }
        let mut sum = 0.0;
        for j in 0..nk {
            if allowed.map_or(true, |a| a[j]) {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(scores)
}

/// Scaled dot-product attention with optional boolean mask.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    check_2d(v, "attention v")?;
    if v.rows() != k.rows() {
        return Err(Error::shape(format!(
            "attention keys {:?} vs values {:?}",
            k.shape(),
            v.shape()
        )));
    }
    let p = attention_probs(q, k, mask)?;
    Ok(matmul_unchecked(&p, v))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm on scalar"))?;
    if gain.len() != c || bias.len() != c {
        return Err(Error::shape(format!(
            "layer_norm width {c} vs gain {} bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let (mean, inv_std) = row_stats(row);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(out)
}

/// Mean and `1/sqrt(var + eps)` of one row (population variance).
#[inline]
pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// `x · w + b` for `x[n,in]`, `w[in,out]`, `b[out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if b.len() != y.cols() {
        return Err(Error::shape(format!(
            "bias length {} for {} outputs",
            b.len(),
            y.cols()
        )));
    }
    let c = y.cols();
    for row in y.data_mut().chunks_mut(c) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(y)
}

/// Affine layers with a rectifier between consecutive layers.
pub fn mlp(x: &Tensor, layers: &[(&Tensor, &Tensor)]) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = linear(&h, w, b)?;
        if i + 1 < layers.len() {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}
