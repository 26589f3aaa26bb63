//! Patch-based cross-domain guidance: a triplet loss on depth features
//! driven by panoptic labels, and a depth-similarity pull on semantic
//! features.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NORM_EPS: f64 = 1e-8;

/// Anchors and neighbour sets over `K×K` stride-1 windows lying fully inside
/// an `h×w` grid. Indices are flat `y*w + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchIndex {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

fn check_k(k: usize, h: usize, w: usize) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::config(format!("patch size must be odd and at least 3, got {k}")));
    }
    if k > h.min(w) {
        return Err(Error::config(format!("patch size {k} exceeds the {h}x{w} grid")));
    }
    Ok(())
}

/// Visits each window: calls `f(anchor, neighbours)` with the anchor itself
/// excluded from the neighbours.
fn windows(k: usize, h: usize, w: usize, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
    let r = k / 2;
    for y in r..h - r {
        for x in r..w - r {
            let a = y * w + x;
            let mut it = (y - r..=y + r)
                .flat_map(move |yy| (x - r..=x + r).map(move |xx| yy * w + xx))
                .filter(move |&p| p != a);
            f(a, &mut it);
        }
    }
}

impl PatchIndex {
    /// Positives share the anchor's segment id, negatives carry another
    /// non-void id. Void anchors and neighbours are skipped, and only
    /// anchors with at least one negative are kept.
    pub fn semantic(ids: &[u32], h: usize, w: usize, k: usize) -> Result<Self> {
        check_k(k, h, w)?;
        let mut out = Self::empty(k, h, w);
        windows(k, h, w, |a, nb| {
            if ids[a] == 0 {
                return;
            }
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for p in nb {
                match ids[p] {
                    0 => {}
                    id if id == ids[a] => pos.push(p),
                    _ => neg.push(p),
                }
            }
            if !neg.is_empty() {
                out.anchors.push(a);
                out.positives.push(pos);
                out.negatives.push(neg);
            }
        });
        Ok(out)
    }

    /// Anchors need valid depth and at least one valid neighbour; the
    /// neighbours are the valid pixels of the window.
    pub fn depth(valid: &[bool], h: usize, w: usize, k: usize) -> Result<Self> {
        check_k(k, h, w)?;
        let mut out = Self::empty(k, h, w);
        windows(k, h, w, |a, nb| {
            if !valid[a] {
                return;
            }
            let pos: Vec<usize> = nb.filter(|&p| valid[p]).collect();
            if !pos.is_empty() {
                out.anchors.push(a);
                out.positives.push(pos);
                out.negatives.push(Vec::new());
            }
        });
        Ok(out)
    }

    fn empty(k: usize, height: usize, width: usize) -> Self {
        Self {
            k,
            height,
            width,
            anchors: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Accumulates `scale · ∂‖a−b‖/∂a` into `ga` and its negative into `gb`.
fn dist_grad(a: &[f64], b: &[f64], d: f64, scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    if d == 0.0 {
        return;
    }
    for c in 0..a.len() {
        let g = scale * (a[c] - b[c]) / d;
        ga[c] += g;
        gb[c] -= g;
    }
}

/// `f / (‖f‖ + ε)` per row, plus the row norms.
fn normalize_rows(f: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = f.clone();
    let mut norms = Vec::with_capacity(f.rows());
    for i in 0..f.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n + NORM_EPS);
        norms.push(n);
    }
    (out, norms)
}

/// Backward of [`normalize_rows`].
fn normalize_rows_backward(f: &Tensor, norms: &[f64], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(f.shape());
    for i in 0..f.rows() {
        let n = norms[i];
        let x = f.row(i);
        let g = dy.row(i);
        let s = n + NORM_EPS;
        let dot: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum();
        let out = dx.row_mut(i);
        for c in 0..x.len() {
            let radial = if n > 0.0 { dot * x[c] / (n * s * s) } else { 0.0 };
            out[c] = g[c] / s - radial;
        }
    }
    dx
}

/// Triplet loss of one level over normalized features `[h*w, C]`. Returns
/// the mean over anchors and the gradient w.r.t. the raw features; `None`
/// without anchors.
pub fn semantic_guidance_level(features: &Tensor, index: &PatchIndex, alpha: f64) -> Option<(f64, Tensor)> {
    if index.anchors.is_empty() {
        return None;
    }
    let (fh, norms) = normalize_rows(features);
    let mut dfh = Tensor::zeros(features.shape());
    let m = index.anchors.len() as f64;
    let mut loss = 0.0;
    let mut grow = vec![0.0; features.cols()];
    for (ai, &a) in index.anchors.iter().enumerate() {
        let fa = fh.row(a);
        let farthest_pos = arg_extreme(&index.positives[ai], |p| dist(fa, fh.row(p)), |x, best| x > best);
        let nearest_neg = arg_extreme(&index.negatives[ai], |p| dist(fa, fh.row(p)), |x, best| x < best);
        let (dp, dn) = (farthest_pos.map_or(0.0, |x| x.1), nearest_neg.map_or(0.0, |x| x.1));
        let l = alpha + dp - dn;
        if l <= 0.0 {
            continue;
        }
        loss += l / m;
        let fa = fa.to_vec();
        if let Some((p, d)) = farthest_pos {
            let fp = fh.row(p).to_vec();
            grow.iter_mut().for_each(|v| *v = 0.0);
            let mut gp = vec![0.0; fp.len()];
            dist_grad(&fa, &fp, d, 1.0 / m, &mut grow, &mut gp);
            add_row(&mut dfh, a, &grow);
            add_row(&mut dfh, p, &gp);
        }
        if let Some((q, d)) = nearest_neg {
            let fq = fh.row(q).to_vec();
            grow.iter_mut().for_each(|v| *v = 0.0);
            let mut gq = vec![0.0; fq.len()];
            dist_grad(&fa, &fq, d, -1.0 / m, &mut grow, &mut gq);
            add_row(&mut dfh, a, &grow);
            add_row(&mut dfh, q, &gq);
        }
    }
    Some((loss, normalize_rows_backward(features, &norms, &dfh)))
}

fn add_row(t: &mut Tensor, i: usize, v: &[f64]) {
    for (o, g) in t.row_mut(i).iter_mut().zip(v) {
        *o += g;
    }
}

/// First index (in list order, which is ascending) achieving the extreme.
fn arg_extreme(
    items: &[usize],
    key: impl Fn(usize) -> f64,
    better: impl Fn(f64, f64) -> bool,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &p in items {
        let v = key(p);
        if best.map_or(true, |(_, b)| better(v, b)) {
            best = Some((p, v));
        }
    }
    best
}

/// Depth-similarity pull of one level over raw features `[h*w, C]`:
/// `−mean_i Σ_j exp(−|d_i−d_j|/τ)·exp(−‖F_i−F_j‖)`. `None` without anchors.
pub fn depth_guidance_level(features: &Tensor, depth: &[f64], index: &PatchIndex, tau: f64) -> Option<(f64, Tensor)> {
    if index.anchors.is_empty() {
        return None;
    }
    let m = index.anchors.len() as f64;
    let mut grad = Tensor::zeros(features.shape());
    let mut loss = 0.0;
    let c = features.cols();
    let mut ga = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for (ai, &a) in index.anchors.iter().enumerate() {
        for &p in &index.positives[ai] {
            let wd = (-(depth[a] - depth[p]).abs() / tau).exp();
            let d = dist(features.row(a), features.row(p));
            let term = wd * (-d).exp();
            loss -= term / m;
            ga.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            // ∂(−term/m)/∂d = term/m.
            dist_grad(features.row(a), features.row(p), d, term / m, &mut ga, &mut gb);
            add_row(&mut grad, a, &ga);
            add_row(&mut grad, p, &gb);
        }
    }
    Some((loss, grad))
}
