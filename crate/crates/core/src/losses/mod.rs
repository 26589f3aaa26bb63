//! Training objective: bipartite matching, classification and mask losses
//! with deep supervision, scale-invariant depth loss, and the two guidance
//! losses, weighted into one total with analytic output gradients.

mod guidance;
mod matching;
mod terms;

use serde::{Deserialize, Serialize};

pub use guidance::{depth_guidance_level, semantic_guidance_level, PatchIndex, NORM_EPS};
pub use matching::{hungarian_match, MatchResult};
pub use terms::{bce_logits, dice_logits, loss_cls, loss_depth, loss_mask, mask_pair};

use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::numerics::{sigmoid_scalar, Tensor};
use crate::scene::resample::{downsample_depth, downsample_labels};
use crate::scene::{AnnotationMode, CategoryTable, Scene, LEVEL_STRIDES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub depth: f64,
    pub sg: f64,
    pub dg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            mask: 5.0,
            depth: 2.5,
            sg: 0.1,
            dg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            cls: 0.0,
            mask: 0.0,
            depth: 0.0,
            sg: 0.0,
            dg: 0.0,
        }
    }

    pub fn combine(&self, r: &LossReport) -> f64 {
        self.cls * r.l_cls + self.mask * r.l_mask + self.depth * r.l_depth + self.sg * r.l_sg + self.dg * r.l_dg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Matching cost weights on `−p(class)` and on `BCE + dice`.
    pub match_cls: f64,
    pub match_mask: f64,
    pub no_object_weight: f64,
    /// Triplet margin.
    pub alpha: f64,
    /// Guidance window size.
    pub patch: usize,
    /// Depth-similarity temperature in meters.
    pub tau: f64,
    /// Variance weight of the scale-invariant loss.
    pub si_lambda: f64,
    pub enable_sg: bool,
    pub enable_dg: bool,
    /// Supervise every decoder layer rather than only the last.
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            match_cls: 2.0,
            match_mask: 5.0,
            no_object_weight: 0.1,
            alpha: 0.3,
            patch: 5,
            tau: 10.0,
            si_lambda: 0.85,
            enable_sg: true,
            enable_dg: true,
            deep_supervision: true,
        }
    }
}

/// Which terms a training phase may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Classification and mask losses only.
    Segmentation,
    Joint,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_mask: f64,
    pub l_depth: f64,
    pub l_sg: f64,
    pub l_dg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_mask, self.l_depth, self.l_sg, self.l_dg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Ground truth resampled to the prediction grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub mode: AnnotationMode,
    pub height: usize,
    pub width: usize,
    /// Class index and 1/4-resolution mask of each GT segment present at
    /// that resolution.
    pub segments: Vec<(usize, Vec<bool>)>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    /// Panoptic ids at each pyramid level.
    pub level_ids: Vec<Vec<u32>>,
    /// Depth and validity at each pyramid level.
    pub level_depth: Vec<(Vec<f64>, Vec<bool>)>,
    pub level_dims: Vec<(usize, usize)>,
}

impl Targets {
    pub fn new(scene: &Scene, table: &CategoryTable) -> Result<Self> {
        let (h, w) = (scene.height(), scene.width());
        let ids4 = downsample_labels(&scene.panoptic_gt.ids, h, w, 4);
        let (depth, valid) = downsample_depth(&scene.depth_gt.depth, &scene.depth_gt.valid, h, w, 4);
        let mut segments = Vec::new();
        for seg in &scene.panoptic_gt.segments {
            let mask: Vec<bool> = ids4.iter().map(|&i| i == seg.id).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let class = table
                .class_index(seg.category_id)
                .ok_or_else(|| Error::parse("segments", format!("unknown category {}", seg.category_id)))?;
            segments.push((class, mask));
        }
        let mut level_ids = Vec::new();
        let mut level_depth = Vec::new();
        let mut level_dims = Vec::new();
        for &s in &LEVEL_STRIDES {
            level_ids.push(downsample_labels(&scene.panoptic_gt.ids, h, w, s));
            level_depth.push(downsample_depth(&scene.depth_gt.depth, &scene.depth_gt.valid, h, w, s));
            level_dims.push((h / s, w / s));
        }
        Ok(Self {
            mode: scene.annotation_mode,
            height: h / 4,
            width: w / 4,
            segments,
            depth,
            valid,
            level_ids,
            level_depth,
            level_dims,
        })
    }
}

/// Gradients of the weighted total w.r.t. the model outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    /// Per decoder layer `(d class_logits, d mask_logits)`.
    pub predictions: Vec<Option<(Tensor, Tensor)>>,
    pub segment_depth: Option<Tensor>,
    pub backup_depth: Option<Tensor>,
    /// On the semantic pyramid levels (depth guidance).
    pub semantic_levels: Vec<Option<Tensor>>,
    /// On the depth pyramid levels (semantic guidance).
    pub depth_levels: Vec<Option<Tensor>>,
}

/// `λ_cls·(−p(class)) + λ_mask·(BCE + dice)` for every query and segment.
pub fn matching_cost(
    class_probs: &Tensor,
    mask_logits: &Tensor,
    segments: &[(usize, Vec<bool>)],
    w_cls: f64,
    w_mask: f64,
) -> Tensor {
    let (n, g) = (class_probs.rows(), segments.len());
    let mut cost = Tensor::zeros(&[n, g]);
    for i in 0..n {
        let logits = mask_logits.row(i);
        let npix = logits.len() as f64;
        let probs: Vec<f64> = logits.iter().map(|&x| sigmoid_scalar(x)).collect();
        let softplus_sum: f64 = logits.iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).sum();
        let prob_sum: f64 = probs.iter().sum();
        for (j, (class, mask)) in segments.iter().enumerate() {
            let (mut x_in, mut p_in, mut area) = (0.0, 0.0, 0.0);
            for (p, &m) in mask.iter().enumerate() {
                if m {
                    x_in += logits[p];
                    p_in += probs[p];
                    area += 1.0;
                }
            }
            let bce = (softplus_sum - x_in) / npix;
            let dice = 1.0 - (2.0 * p_in + 1.0) / (prob_sum + area + 1.0);
            cost.row_mut(i)[j] = -w_cls * class_probs.at(i, *class) + w_mask * (bce + dice);
        }
    }
    cost
}

/// Evaluates every active term for one scene and returns the report plus
/// output gradients of the weighted total.
pub fn total_loss(out: &ForwardOutput, targets: &Targets, cfg: &LossConfig, phase: Phase) -> Result<(LossReport, OutputGrads)> {
    let w = cfg.weights;
    let layers = out.seg.predictions.len();
    let levels = LEVEL_STRIDES.len();
    let mut grads = OutputGrads {
        predictions: vec![None; layers],
        segment_depth: None,
        backup_depth: None,
        semantic_levels: vec![None; levels],
        depth_levels: vec![None; levels],
    };
    let mut report = LossReport::default();
    let mut active = false;
    let joint = phase == Phase::Joint;
    let mut final_match: Option<MatchResult> = None;

    if targets.mode.has_panoptic() {
        active = true;
        let first = if cfg.deep_supervision { 0 } else { layers - 1 };
        for l in first..layers {
            let pred = &out.seg.predictions[l];
            let cost = matching_cost(&pred.class_probs, &pred.mask_logits, &targets.segments, cfg.match_cls, cfg.match_mask);
            let m = hungarian_match(&cost)?;
            let k = pred.num_classes();
            let mut cls_targets = vec![k; pred.num_queries()];
            for &(q, g) in &m.assignment {
                cls_targets[q] = targets.segments[g].0;
            }
            let (lc, mut dlog) = loss_cls(&pred.class_logits, &cls_targets, cfg.no_object_weight);
            let masks: Vec<Vec<bool>> = targets.segments.iter().map(|s| s.1.clone()).collect();
            let (bce, dice, mut dmask) = loss_mask(&pred.mask_logits, &masks, &m.assignment);
            report.l_cls += lc;
            report.l_mask += bce + dice;
            dlog.data_mut().iter_mut().for_each(|v| *v *= w.cls);
            dmask.data_mut().iter_mut().for_each(|v| *v *= w.mask);
            grads.predictions[l] = Some((dlog, dmask));
            if l == layers - 1 {
                final_match = Some(m);
            }
        }
    }

    if joint && targets.mode.has_depth() {
        let mut depth_active = false;
        if let (Some(seg_depth), Some(m)) = (&out.segment_depth, &final_match) {
            let mut g = Tensor::zeros(seg_depth.shape());
            let mut terms = Vec::new();
            for &(q, s) in &m.assignment {
                let pix: Vec<usize> = (0..targets.valid.len())
                    .filter(|&p| targets.valid[p] && targets.segments[s].1[p])
                    .collect();
                let pred: Vec<f64> = pix.iter().map(|&p| seg_depth.at(q, p)).collect();
                let gt: Vec<f64> = pix.iter().map(|&p| targets.depth[p]).collect();
                if let Some((l, gp)) = loss_depth(&pred, &gt, cfg.si_lambda) {
                    terms.push((q, pix, l, gp));
                }
            }
            if !terms.is_empty() {
                depth_active = true;
                let scale = 1.0 / terms.len() as f64;
                for (q, pix, l, gp) in terms {
                    report.l_depth += scale * l;
                    let row = g.row_mut(q);
                    for (p, v) in pix.into_iter().zip(gp) {
                        row[p] += w.depth * scale * v;
                    }
                }
                grads.segment_depth = Some(g);
            }
        }
        if let Some(backup) = &out.backup_depth {
            let pix: Vec<usize> = (0..targets.valid.len()).filter(|&p| targets.valid[p]).collect();
            let pred: Vec<f64> = pix.iter().map(|&p| backup.data()[p]).collect();
            let gt: Vec<f64> = pix.iter().map(|&p| targets.depth[p]).collect();
            if let Some((l, gp)) = loss_depth(&pred, &gt, cfg.si_lambda) {
                depth_active = true;
                report.l_depth += l;
                let mut g = Tensor::zeros(backup.shape());
                for (p, v) in pix.into_iter().zip(gp) {
                    g.data_mut()[p] = w.depth * v;
                }
                grads.backup_depth = Some(g);
            }
        }
        active |= depth_active;
    }

    if joint && cfg.enable_sg && targets.mode.has_panoptic() {
        let mut vals = Vec::new();
        for lvl in 0..levels {
            let (h, w_) = targets.level_dims[lvl];
            if cfg.patch > h.min(w_) {
                continue;
            }
            let idx = PatchIndex::semantic(&targets.level_ids[lvl], h, w_, cfg.patch)?;
            if let Some(v) = semantic_guidance_level(&out.encoder.depth.levels[lvl].tokens, &idx, cfg.alpha) {
                vals.push((lvl, v));
            }
        }
        if !vals.is_empty() {
            active = true;
            let scale = 1.0 / vals.len() as f64;
            for (lvl, (l, mut g)) in vals {
                report.l_sg += scale * l;
                g.data_mut().iter_mut().for_each(|v| *v *= w.sg * scale);
                grads.depth_levels[lvl] = Some(g);
            }
        }
    }

    if joint && cfg.enable_dg && targets.mode.has_depth() {
        let mut vals = Vec::new();
        for lvl in 0..levels {
            let (h, w_) = targets.level_dims[lvl];
            if cfg.patch > h.min(w_) {
                continue;
            }
            let (depth, valid) = &targets.level_depth[lvl];
            let idx = PatchIndex::depth(valid, h, w_, cfg.patch)?;
            if let Some(v) = depth_guidance_level(&out.encoder.semantic.levels[lvl].tokens, depth, &idx, cfg.tau) {
                vals.push((lvl, v));
            }
        }
        if !vals.is_empty() {
            active = true;
            let scale = 1.0 / vals.len() as f64;
            for (lvl, (l, mut g)) in vals {
                report.l_dg += scale * l;
                g.data_mut().iter_mut().for_each(|v| *v *= w.dg * scale);
                grads.semantic_levels[lvl] = Some(g);
            }
        }
    }

    if !active {
        return Err(Error::NoSupervision);
    }
    report.total = w.combine(&report);
    if !report.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_combine_per_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(w.combine(&LossReport::default()), 0.0);
        let unit = LossReport {
            l_cls: 1.0,
            l_mask: 1.0,
            l_depth: 1.0,
            l_sg: 1.0,
            l_dg: 1.0,
            total: 0.0,
        };
        assert!((w.combine(&unit) - 9.7).abs() < 1e-12);
    }

    #[test]
    fn matching_cost_matches_direct_terms() {
        let mut rng = crate::numerics::Rng::new(3);
        let probs = Tensor::from_fn(&[3, 4], |_| rng.uniform());
        let logits = Tensor::from_fn(&[3, 10], |_| rng.normal());
        let segs: Vec<(usize, Vec<bool>)> = (0..2)
            .map(|c| (c, (0..10).map(|_| rng.uniform() < 0.5).collect()))
            .collect();
        let cost = matching_cost(&probs, &logits, &segs, 2.0, 5.0);
        for i in 0..3 {
            for (j, (c, m)) in segs.iter().enumerate() {
                let direct = -2.0 * probs.at(i, *c) + 5.0 * (bce_logits(logits.row(i), m) + dice_logits(logits.row(i), m));
                assert!((cost.at(i, j) - direct).abs() < 1e-12);
            }
        }
    }
}
