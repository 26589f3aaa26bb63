//! Classification, mask and scale-invariant depth losses with analytic
//! gradients.

use crate::numerics::{sigmoid_scalar, Tensor};

/// Row-wise log-softmax.
fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Weighted mean cross-entropy. `targets[i]` is a class column; the
/// no-object column (last) carries `no_object_weight`. Returns the loss and
/// its gradient w.r.t. the logits.
pub fn loss_cls(logits: &Tensor, targets: &[usize], no_object_weight: f64) -> (f64, Tensor) {
    let (n, k1) = (logits.rows(), logits.cols());
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| if t == k1 - 1 { no_object_weight } else { 1.0 })
        .collect();
    let total_w: f64 = weights.iter().sum();
    let mut grad = Tensor::zeros(&[n, k1]);
    if total_w == 0.0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for i in 0..n {
        let lp = log_softmax_row(logits.row(i));
        let w = weights[i] / total_w;
        loss -= w * lp[targets[i]];
        let g = grad.row_mut(i);
        for (c, v) in g.iter_mut().enumerate() {
            *v = w * lp[c].exp();
        }
        g[targets[i]] -= w;
    }
    (loss, grad)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of logits against a binary target.
pub fn bce_logits(logits: &[f64], target: &[bool]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| softplus(x) - if t { x } else { 0.0 })
        .sum::<f64>()
        / n
}

/// Soft dice loss `1 − (2Σpg + 1)/(Σp + Σg + 1)` with `p = σ(logit)`.
pub fn dice_logits(logits: &[f64], target: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid_scalar(x);
        sp += p;
        if t {
            inter += p;
            sg += 1.0;
        }
    }
    1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// BCE plus dice for one pair, with the gradient w.r.t. the logits scaled by
/// `weight`, accumulated into `grad`.
pub fn mask_pair(logits: &[f64], target: &[bool], weight: f64, grad: &mut [f64]) -> (f64, f64) {
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid_scalar(x)).collect();
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&p, &t) in probs.iter().zip(target) {
        sp += p;
        if t {
            inter += p;
            sg += 1.0;
        }
    }
    let num = 2.0 * inter + 1.0;
    let den = sp + sg + 1.0;
    let bce = bce_logits(logits, target);
    let dice = 1.0 - num / den;
    for ((g, &p), &t) in grad.iter_mut().zip(&probs).zip(target) {
        let tf = if t { 1.0 } else { 0.0 };
        let d_bce = (p - tf) / n;
        let d_dice_dp = -(2.0 * tf * den - num) / (den * den);
        *g += weight * (d_bce + d_dice_dp * p * (1.0 - p));
    }
    (bce, dice)
}

/// Mask loss averaged over matched pairs `(query, gt)`. Returns
/// `(bce, dice)` means and the logits gradient of their sum.
pub fn loss_mask(mask_logits: &Tensor, gt_masks: &[Vec<bool>], pairs: &[(usize, usize)]) -> (f64, f64, Tensor) {
    let mut grad = Tensor::zeros(mask_logits.shape());
    if pairs.is_empty() {
        return (0.0, 0.0, grad);
    }
    let w = 1.0 / pairs.len() as f64;
    let (mut bce, mut dice) = (0.0, 0.0);
    for &(q, g) in pairs {
        let logits = mask_logits.row(q).to_vec();
        let (b, d) = mask_pair(&logits, &gt_masks[g], w, grad.row_mut(q));
        bce += w * b;
        dice += w * d;
    }
    (bce, dice, grad)
}

/// Scale-invariant log loss over paired samples; returns the loss and the
/// gradient w.r.t. each prediction. `None` when there are no samples.
pub fn loss_depth(pred: &[f64], gt: &[f64], lambda: f64) -> Option<(f64, Vec<f64>)> {
    let n = pred.len();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let g: Vec<f64> = pred.iter().zip(gt).map(|(d, t)| (d / t).ln()).collect();
    let sum: f64 = g.iter().sum();
    let sq: f64 = g.iter().map(|v| v * v).sum();
    let loss = sq / nf - lambda * sum * sum / (nf * nf);
    let grad = g
        .iter()
        .zip(pred)
        .map(|(gi, d)| (2.0 * gi / nf - 2.0 * lambda * sum / (nf * nf)) / d)
        .collect();
    Some((loss, grad))
}
