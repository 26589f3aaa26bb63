//! Panoptic quality, depth-aware panoptic quality and monocular depth error
//! statistics, with dataset-level pooling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CategoryTable, DepthMap, PanopticMap};

/// Depth-error thresholds evaluated by default.
pub const DPQ_LAMBDAS: [f64; 3] = [0.1, 0.25, 0.5];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassStats {
    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            0.0
        } else {
            self.iou_sum / denom
        }
    }

    fn merge(&mut self, other: &ClassStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

/// Per-category statistics plus the set of categories present in GT.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u32, ClassStats>,
    pub gt_classes: std::collections::BTreeSet<u32>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (c, s) in &other.per_class {
            self.per_class.entry(*c).or_default().merge(s);
        }
        self.gt_classes.extend(other.gt_classes.iter().copied());
    }

    /// Mean PQ over GT-present classes passing `filter`; 0 when none.
    pub fn pq_where(&self, filter: impl Fn(u32) -> bool) -> f64 {
        let vals: Vec<f64> = self
            .gt_classes
            .iter()
            .filter(|&&c| filter(c))
            .map(|c| self.per_class.get(c).map_or(0.0, ClassStats::pq))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn pq(&self) -> f64 {
        self.pq_where(|_| true)
    }
}

fn category_map(map: &PanopticMap) -> Result<BTreeMap<u32, u32>> {
    let mut out = BTreeMap::new();
    for s in &map.segments {
        out.insert(s.id, s.category_id);
    }
    for id in map.areas().keys() {
        if !out.contains_key(id) {
            return Err(Error::parse("segments", format!("id {id} present in map but absent from segments")));
        }
    }
    Ok(out)
}

/// Per-class TP/FP/FN and IoU sums for one prediction against its GT.
///
/// GT-void pixels leave the union; prediction segments lying more than half
/// on GT void are not counted as false positives.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap) -> Result<PqStats> {
    if (pred.height, pred.width) != (gt.height, gt.width) || pred.ids.len() != gt.ids.len() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let pred_cat = category_map(pred)?;
    let gt_cat = category_map(gt)?;
    let pred_area = pred.areas();
    let gt_area = gt.areas();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut pred_on_void: BTreeMap<u32, usize> = BTreeMap::new();
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        if p == 0 {
            continue;
        }
        if g == 0 {
            *pred_on_void.entry(p).or_insert(0) += 1;
        } else {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }

    let mut stats = PqStats::default();
    let mut matched_pred = std::collections::BTreeSet::new();
    let mut matched_gt = std::collections::BTreeSet::new();
    for (&(g, p), &i) in &inter {
        if gt_cat[&g] != pred_cat[&p] {
            continue;
        }
        let void = pred_on_void.get(&p).copied().unwrap_or(0);
        let union = pred_area[&p] + gt_area[&g] - i - void;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            assert!(matched_gt.insert(g), "ground-truth segment {g} matched twice");
            assert!(matched_pred.insert(p), "predicted segment {p} matched twice");
            let s = stats.per_class.entry(gt_cat[&g]).or_default();
            s.tp += 1;
            s.iou_sum += iou;
        }
    }
    for &g in gt_area.keys() {
        stats.gt_classes.insert(gt_cat[&g]);
        if !matched_gt.contains(&g) {
            stats.per_class.entry(gt_cat[&g]).or_default().fn_ += 1;
        }
    }
    for (&p, &area) in &pred_area {
        if matched_pred.contains(&p) {
            continue;
        }
        let void = pred_on_void.get(&p).copied().unwrap_or(0);
        if 2 * void > area {
            continue;
        }
        stats.per_class.entry(pred_cat[&p]).or_default().fp += 1;
    }
    Ok(stats)
}

/// Prediction with pixels whose relative depth error exceeds `lambda`
/// voided. Pixels without valid GT depth are kept.
pub fn void_by_depth(pred: &PanopticMap, pred_depth: &DepthMap, gt_depth: &DepthMap, lambda: f64) -> PanopticMap {
    let mut out = pred.clone();
    for (p, id) in out.ids.iter_mut().enumerate() {
        if !gt_depth.valid[p] {
            continue;
        }
        let g = gt_depth.depth[p];
        let ok = pred_depth.valid[p] && (pred_depth.depth[p] - g).abs() <= lambda * g;
        if !ok {
            *id = 0;
        }
    }
    out
}

pub fn dpq(
    pred: &PanopticMap,
    pred_depth: &DepthMap,
    gt: &PanopticMap,
    gt_depth: &DepthMap,
    lambda: f64,
) -> Result<PqStats> {
    if pred_depth.depth.len() != pred.ids.len() || gt_depth.depth.len() != gt.ids.len() {
        return Err(Error::shape("depth maps must match the panoptic maps"));
    }
    panoptic_quality(&void_by_depth(pred, pred_depth, gt_depth, lambda), gt)
}

/// Pooled sums behind the depth metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthSums {
    pub count: usize,
    pub abs_rel: f64,
    pub sq_log: f64,
    pub delta: [usize; 3],
}

impl DepthSums {
    pub fn merge(&mut self, o: &DepthSums) {
        self.count += o.count;
        self.abs_rel += o.abs_rel;
        self.sq_log += o.sq_log;
        for k in 0..3 {
            self.delta[k] += o.delta[k];
        }
    }

    pub fn metrics(&self) -> Result<DepthMetrics> {
        if self.count == 0 {
            return Err(Error::Empty("no valid ground-truth depth pixels".into()));
        }
        let n = self.count as f64;
        Ok(DepthMetrics {
            abs_rel: self.abs_rel / n,
            rmse_log: (self.sq_log / n).sqrt(),
            delta: self.delta.map(|d| d as f64 / n),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse_log: f64,
    /// Fractions with `max(d/d̂, d̂/d) < 1.25^k`, `k = 1, 2, 3`.
    pub delta: [f64; 3],
}

pub fn depth_sums(pred: &DepthMap, gt: &DepthMap) -> Result<DepthSums> {
    if pred.depth.len() != gt.depth.len() {
        return Err(Error::shape("depth maps differ in size"));
    }
    let mut s = DepthSums::default();
    let thresholds = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    for p in 0..gt.depth.len() {
        if !gt.valid[p] {
            continue;
        }
        if !pred.valid[p] {
            return Err(Error::Empty(format!("prediction has no depth at pixel {p}")));
        }
        let (d, g) = (pred.depth[p], gt.depth[p]);
        s.count += 1;
        s.abs_rel += (d - g).abs() / g;
        s.sq_log += (d.ln() - g.ln()).powi(2);
        let ratio = (d / g).max(g / d);
        for k in 0..3 {
            if ratio < thresholds[k] {
                s.delta[k] += 1;
            }
        }
    }
    Ok(s)
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    depth_sums(pred, gt)?.metrics()
}

/// Everything needed to pool one scene into a dataset report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub pq: PqStats,
    pub dpq: Vec<PqStats>,
    pub depth: DepthSums,
}

pub fn evaluate_scene(
    pred: &PanopticMap,
    pred_depth: &DepthMap,
    gt: &PanopticMap,
    gt_depth: &DepthMap,
) -> Result<SceneEval> {
    Ok(SceneEval {
        pq: panoptic_quality(pred, gt)?,
        dpq: DPQ_LAMBDAS
            .iter()
            .map(|&l| dpq(pred, pred_depth, gt, gt_depth, l))
            .collect::<Result<_>>()?,
        depth: depth_sums(pred_depth, gt_depth)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySplit {
    pub all: f64,
    pub thing: f64,
    pub stuff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pq: QualitySplit,
    /// One entry per threshold in [`DPQ_LAMBDAS`] order.
    pub dpq: Vec<(f64, QualitySplit)>,
    pub dpq_mean: f64,
    pub depth: Option<DepthMetrics>,
    pub counts: BTreeMap<u32, ClassStats>,
}

fn split(stats: &PqStats, table: &CategoryTable) -> QualitySplit {
    QualitySplit {
        all: stats.pq(),
        thing: stats.pq_where(|c| table.is_thing(c)),
        stuff: stats.pq_where(|c| !table.is_thing(c)),
    }
}

/// Pools counts over scenes in order, then forms the ratios.
pub fn aggregate(scenes: &[SceneEval], table: &CategoryTable) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("no scenes to aggregate".into()));
    }
    let mut pq = PqStats::default();
    let mut dpq_stats = vec![PqStats::default(); DPQ_LAMBDAS.len()];
    let mut depth = DepthSums::default();
    for s in scenes {
        pq.merge(&s.pq);
        for (acc, d) in dpq_stats.iter_mut().zip(&s.dpq) {
            acc.merge(d);
        }
        depth.merge(&s.depth);
    }
    let dpq: Vec<(f64, QualitySplit)> = DPQ_LAMBDAS
        .iter()
        .zip(&dpq_stats)
        .map(|(&l, s)| (l, split(s, table)))
        .collect();
    let dpq_mean = dpq.iter().map(|(_, q)| q.all).sum::<f64>() / dpq.len() as f64;
    Ok(MetricReport {
        pq: split(&pq, table),
        dpq,
        dpq_mean,
        depth: depth.metrics().ok(),
        counts: pq.per_class,
    })
}

fn pct(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

impl MetricReport {
    /// Quality values as percentages with one decimal, as printed in tables.
    pub fn to_percent_json(&self) -> serde_json::Value {
        let q = |s: &QualitySplit| serde_json::json!({"all": pct(s.all), "thing": pct(s.thing), "stuff": pct(s.stuff)});
        let dpq: serde_json::Map<String, serde_json::Value> =
            self.dpq.iter().map(|(l, s)| (format!("{l}"), q(s))).collect();
        serde_json::json!({
            "pq": q(&self.pq),
            "dpq": dpq,
            "dpq_mean": pct(self.dpq_mean),
            "depth": self.depth.as_ref().map(|d| serde_json::json!({
                "abs_rel": (d.abs_rel * 1e4).round() / 1e4,
                "rmse_log": (d.rmse_log * 1e4).round() / 1e4,
                "delta": d.delta.map(pct),
            })),
            "counts": self.counts,
        })
    }
}
