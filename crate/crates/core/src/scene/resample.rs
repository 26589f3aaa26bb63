//! Grid resampling: bilinear resize (half-pixel centers, edge clamp), 2×2
//! average pooling, and nearest-neighbour label/depth downsampling.
//!
//! Token grids are `[h*w, C]` row-major over `(y, x)`; plane stacks are
//! `[planes, h*w]`.

use crate::numerics::Tensor;

/// 1-D bilinear taps `(i0, i1, w1)`: `out[o] = (1-w1)·in[i0] + w1·in[i1]`.
pub fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear resize of a token grid `[h*w, C]` to `[oh*ow, C]`.
pub fn resize_tokens(x: &Tensor, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let c = x.cols();
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = Tensor::zeros(&[oh * ow, c]);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let taps = [
                (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
                (y0 * w + x1, (1.0 - wy) * wx),
                (y1 * w + x0, wy * (1.0 - wx)),
                (y1 * w + x1, wy * wx),
            ];
            let orow = out.row_mut(oy * ow + ox);
            for (src, wt) in taps {
                if wt != 0.0 {
                    for (o, v) in orow.iter_mut().zip(x.row(src)) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_tokens`].
pub fn resize_tokens_backward(dy: &Tensor, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let c = dy.cols();
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut dx = Tensor::zeros(&[h * w, c]);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let taps = [
                (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
                (y0 * w + x1, (1.0 - wy) * wx),
                (y1 * w + x0, wy * (1.0 - wx)),
                (y1 * w + x1, wy * wx),
            ];
            let drow = dy.row(oy * ow + ox).to_vec();
            for (src, wt) in taps {
                if wt != 0.0 {
                    for (d, g) in dx.row_mut(src).iter_mut().zip(&drow) {
                        *d += wt * g;
                    }
                }
            }
        }
    }
    dx
}

/// Bilinear resize of one plane `[h*w]` to `[oh*ow]`.
pub fn resize_plane(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![0.0; oh * ow];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let top = (1.0 - wx) * x[y0 * w + x0] + wx * x[y0 * w + x1];
            let bot = (1.0 - wx) * x[y1 * w + x0] + wx * x[y1 * w + x1];
            out[oy * ow + ox] = (1.0 - wy) * top + wy * bot;
        }
    }
    out
}

/// 2×2 mean pooling of a token grid.
pub fn avg_pool2(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.cols();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[oh * ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = out.row_mut(oy * ow + ox);
            for dy in 0..2 {
                for dx in 0..2 {
                    for (o, v) in orow.iter_mut().zip(x.row((2 * oy + dy) * w + 2 * ox + dx)) {
                        *o += 0.25 * v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`].
pub fn avg_pool2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let c = dy.cols();
    let ow = w / 2;
    let mut dx = Tensor::zeros(&[h * w, c]);
    for y in 0..h {
        for x in 0..w {
            let src = dy.row((y / 2) * ow + x / 2).to_vec();
            for (d, g) in dx.row_mut(y * w + x).iter_mut().zip(&src) {
                *d = 0.25 * g;
            }
        }
    }
    dx
}

/// Source index of the nearest sample for an integer downsampling factor
/// (the pixel right of and below the cell center).
#[inline]
pub fn nearest_source(o: usize, factor: usize) -> usize {
    o * factor + factor / 2
}

/// Nearest-neighbour downsample of a label grid by an integer factor.
pub fn downsample_labels(ids: &[u32], h: usize, w: usize, factor: usize) -> Vec<u32> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            out.push(ids[nearest_source(oy, factor) * w + nearest_source(ox, factor)]);
        }
    }
    out
}

/// Valid-aware nearest downsample: each output cell takes the valid pixel
/// closest to the cell center (lowest index on ties), invalid if none.
pub fn downsample_depth(
    depth: &[f64],
    valid: &[bool],
    h: usize,
    w: usize,
    factor: usize,
) -> (Vec<f64>, Vec<bool>) {
    let (oh, ow) = (h / factor, w / factor);
    let center = (factor as f64 - 1.0) / 2.0;
    let mut out_d = vec![0.0; oh * ow];
    let mut out_v = vec![false; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best: Option<(f64, usize)> = None;
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = (oy * factor + dy) * w + ox * factor + dx;
                    if !valid[p] {
                        continue;
                    }
                    let dist = (dy as f64 - center).powi(2) + (dx as f64 - center).powi(2);
                    if best.map_or(true, |(bd, _)| dist < bd) {
                        best = Some((dist, p));
                    }
                }
            }
            if let Some((_, p)) = best {
                out_d[oy * ow + ox] = depth[p];
                out_v[oy * ow + ox] = true;
            }
        }
    }
    (out_d, out_v)
}

/// Nearest-neighbour resample of a per-query boolean field from a `(h, w)`
/// grid onto a coarser `(oh, ow)` grid.
pub fn nearest_bool(src: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    let fy = h / oh;
    let fx = w / ow;
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            out.push(src[nearest_source(oy, fy) * w + nearest_source(ox, fx)]);
        }
    }
    out
}
