//! Mask-classification head: per-segment queries refined by masked
//! cross-attention over the semantic pyramid, class and mask predictions
//! after every decoder layer, and panoptic post-processing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::{
    Attention, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear,
    Mlp, MlpCache, Params,
};
use crate::numerics::{
    matmul_nt, matmul_tn, matmul_unchecked, sigmoid_scalar, softmax_rows_inplace, AttnMask, Rng,
    Tensor,
};
use crate::scene::sine_position;
use crate::scene::resample::{nearest_bool, resize_plane};
use crate::scene::{CategoryTable, FeaturePyramid, PanopticMap, SegmentInfo};

/// Pyramid level visited by each decoder layer, cycling coarse to fine.
pub const LEVEL_ORDER: [usize; 3] = [2, 1, 0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub cross: Attention,
    pub self_attn: Attention,
    pub ffn: FeedForward,
}

pub struct DecoderLayerCache {
    cross: AttentionCache,
    self_attn: AttentionCache,
    ffn: FeedForwardCache,
}

impl DecoderLayer {
    pub fn new(width: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            cross: Attention::new(width, rng),
            self_attn: Attention::new(width, rng),
            ffn: FeedForward::new(width, hidden, rng),
        }
    }

    /// Masked cross-attention, then self-attention, then FFN; each pre-norm
    /// with a residual.
    pub fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        mask: Option<&AttnMask>,
    ) -> (Tensor, DecoderLayerCache) {
        let (x, cross) = self.cross.forward_cross(queries, keys, values, mask);
        let (x, self_attn) = self.self_attn.forward_self(&x);
        let (x, ffn) = self.ffn.forward(&x);
        (
            x,
            DecoderLayerCache {
                cross,
                self_attn,
                ffn,
            },
        )
    }

    /// Returns the query gradient and the gradient on the level features
    /// (keys and values summed, since keys are features plus a constant
    /// positional code).
    pub fn backward(
        &self,
        cache: &DecoderLayerCache,
        dy: &Tensor,
        grad: &mut DecoderLayer,
    ) -> (Tensor, Tensor) {
        let dx = self.ffn.backward(&cache.ffn, dy, &mut grad.ffn);
        let (dx, _) = self.self_attn.backward(&cache.self_attn, &dx, &mut grad.self_attn);
        let (dx, mem) = self.cross.backward(&cache.cross, &dx, &mut grad.cross);
        let mem = mem.expect("cross-attention memory gradient");
        let mut dfeat = mem.keys;
        dfeat.add_assign(&mem.values);
        (dx, dfeat)
    }
}

impl Params for DecoderLayer {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.cross.visit(f);
        self.self_attn.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.cross.visit_mut(f);
        self.self_attn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Class logits and mask logits for every query.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    /// `[N, K+1]`, last column is the no-object class.
    pub class_logits: Tensor,
    /// Row-wise softmax of `class_logits`.
    pub class_probs: Tensor,
    /// `[N, h4*w4]`
    pub mask_logits: Tensor,
    pub height: usize,
    pub width: usize,
}

impl SegPrediction {
    pub fn num_queries(&self) -> usize {
        self.class_probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.cols() - 1
    }

    pub fn from_logits(class_logits: Tensor, mask_logits: Tensor, height: usize, width: usize) -> Self {
        let mut class_probs = class_logits.clone();
        softmax_rows_inplace(&mut class_probs);
        Self {
            class_logits,
            class_probs,
            mask_logits,
            height,
            width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHead {
    pub norm: LayerNorm,
    pub class: Linear,
    pub mask_embed: Mlp,
}

pub struct SegHeadCache {
    ln: LayerNormCache,
    xn: Tensor,
    mlp: MlpCache,
    embed: Tensor,
}

impl SegHead {
    pub fn new(width: usize, classes: usize, pixel_dim: usize, rng: &mut Rng) -> Self {
        Self {
            norm: LayerNorm::new(width),
            class: Linear::new(width, classes + 1, rng),
            mask_embed: Mlp::new(&[width, width, pixel_dim], rng),
        }
    }

    /// Class logits from a linear layer; mask logits as the dot product of
    /// the embedded queries with every pixel embedding.
    pub fn forward(&self, queries: &Tensor, pixel: &crate::scene::FeatureLevel) -> (SegPrediction, SegHeadCache) {
        let (xn, ln) = self.norm.forward(queries);
        let logits = self.class.forward(&xn);
        let (embed, mlp) = self.mask_embed.forward(&xn);
        let masks = matmul_nt(&embed, &pixel.tokens);
        (
            SegPrediction::from_logits(logits, masks, pixel.height, pixel.width),
            SegHeadCache { ln, xn, mlp, embed },
        )
    }

    pub fn backward(
        &self,
        cache: &SegHeadCache,
        pixel: &Tensor,
        d_logits: &Tensor,
        d_masks: &Tensor,
        grad: &mut SegHead,
        d_pixel: &mut Tensor,
    ) -> Tensor {
        let d_embed = matmul_unchecked(d_masks, pixel);
        d_pixel.add_assign(&matmul_tn(d_masks, &cache.embed));
        let mut dxn = self.mask_embed.backward(&cache.mlp, &d_embed, &mut grad.mask_embed);
        dxn.add_assign(&self.class.backward(&cache.xn, d_logits, &mut grad.class));
        self.norm.backward(&cache.ln, &dxn, &mut grad.norm)
    }
}

impl Params for SegHead {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.norm.visit(f);
        self.class.visit(f);
        self.mask_embed.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm.visit_mut(f);
        self.class.visit_mut(f);
        self.mask_embed.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    /// `[N, C]` learned initial queries.
    pub query_init: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub head: SegHead,
}

impl SegmentationParams {
    pub fn new(
        queries: usize,
        width: usize,
        hidden: usize,
        layers: usize,
        classes: usize,
        pixel_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            query_init: Tensor::from_fn(&[queries, width], |_| rng.normal()),
            layers: (0..layers).map(|_| DecoderLayer::new(width, hidden, rng)).collect(),
            head: SegHead::new(width, classes, pixel_dim, rng),
        }
    }
}

impl Params for SegmentationParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.query_init);
        self.layers.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.query_init);
        self.layers.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Boolean mask `[N, h*w]` on a level grid: a query may attend where its
/// resampled mask logit is positive (sigmoid > 0.5).
pub fn attention_mask_from_logits(pred: &SegPrediction, level_h: usize, level_w: usize) -> AttnMask {
    let n = pred.num_queries();
    let mut allowed = Vec::with_capacity(n * level_h * level_w);
    for i in 0..n {
        let fg: Vec<bool> = pred.mask_logits.row(i).iter().map(|&v| v > 0.0).collect();
        allowed.extend(nearest_bool(&fg, pred.height, pred.width, level_h, level_w));
    }
    AttnMask::new(n, level_h * level_w, allowed).expect("mask shape")
}

/// Keys for a level: features plus a fixed sinusoidal position code.
pub fn level_keys(level: &crate::scene::FeatureLevel) -> Tensor {
    let pos = sine_position(level.height, level.width, level.tokens.cols());
    let mut keys = level.tokens.clone();
    keys.add_assign(&pos);
    keys
}

pub struct SegCache {
    layers: Vec<DecoderLayerCache>,
    heads: Vec<SegHeadCache>,
}

pub struct SegForward {
    /// Final per-segment queries (the residual stream after the last layer).
    pub queries: Tensor,
    /// One prediction per decoder layer; the last is the final output.
    pub predictions: Vec<SegPrediction>,
    pub cache: SegCache,
}

impl SegForward {
    pub fn final_prediction(&self) -> &SegPrediction {
        self.predictions.last().expect("at least one layer")
    }
}

pub fn forward_segmentation(pyr: &FeaturePyramid, params: &SegmentationParams) -> SegForward {
    forward_segmentation_from(pyr, params, &params.query_init)
}

/// Same as [`forward_segmentation`] with explicit initial queries.
pub fn forward_segmentation_from(
    pyr: &FeaturePyramid,
    params: &SegmentationParams,
    init: &Tensor,
) -> SegForward {
    let keys: Vec<Tensor> = pyr.levels.iter().map(level_keys).collect();
    let mut x = init.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut heads = Vec::with_capacity(params.layers.len());
    let mut predictions: Vec<SegPrediction> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let lvl = LEVEL_ORDER[l % LEVEL_ORDER.len()];
        let level = &pyr.levels[lvl];
        let mask = predictions
            .last()
            .map(|p| attention_mask_from_logits(p, level.height, level.width));
        let (next, lc) = layer.forward(&x, &keys[lvl], &level.tokens, mask.as_ref());
        x = next;
        let (pred, hc) = params.head.forward(&x, &pyr.embedding);
        layers.push(lc);
        heads.push(hc);
        predictions.push(pred);
    }
    SegForward {
        queries: x,
        predictions,
        cache: SegCache { layers, heads },
    }
}

/// Gradients arriving at the segmentation outputs.
pub struct SegOutputGrads {
    /// Per layer `(d class_logits, d mask_logits)`; `None` for layers with no
    /// loss attached.
    pub predictions: Vec<Option<(Tensor, Tensor)>>,
    /// Gradient on the final queries from downstream consumers.
    pub queries: Option<Tensor>,
}

/// Backward through the decoder. Returns gradients on the three semantic
/// levels and the pixel embedding.
pub fn backward_segmentation(
    pyr: &FeaturePyramid,
    params: &SegmentationParams,
    fwd: &SegForward,
    grads: &SegOutputGrads,
    out: &mut SegmentationParams,
) -> (Vec<Tensor>, Tensor) {
    let mut dx = grads
        .queries
        .clone()
        .unwrap_or_else(|| Tensor::zeros(fwd.queries.shape()));
    let mut d_pixel = Tensor::zeros(pyr.embedding.tokens.shape());
    let mut d_levels: Vec<Tensor> = pyr
        .levels
        .iter()
        .map(|l| Tensor::zeros(l.tokens.shape()))
        .collect();
    for l in (0..params.layers.len()).rev() {
        if let Some((dlog, dmask)) = &grads.predictions[l] {
            let dh = params.head.backward(
                &fwd.cache.heads[l],
                &pyr.embedding.tokens,
                dlog,
                dmask,
                &mut out.head,
                &mut d_pixel,
            );
            dx.add_assign(&dh);
        }
        let (dprev, dfeat) = params.layers[l].backward(&fwd.cache.layers[l], &dx, &mut out.layers[l]);
        d_levels[LEVEL_ORDER[l % LEVEL_ORDER.len()]].add_assign(&dfeat);
        dx = dprev;
    }
    out.query_init.add_assign(&dx);
    (d_levels, d_pixel)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub mask_threshold: f64,
    pub min_area: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            mask_threshold: 0.5,
            min_area: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanopticResult {
    pub panoptic: PanopticMap,
    /// Queries owning at least one pixel of a surviving segment, ascending.
    pub kept_query_ids: Vec<usize>,
    /// Max real-class probability of every query.
    pub per_query_confidence: Vec<f64>,
    /// Owning query of every full-resolution pixel, `None` for void.
    pub owner: Vec<Option<usize>>,
}

/// Confidence-filtered panoptic inference at full resolution.
///
/// Queries scoring below the threshold (or predicting no-object) are
/// dropped; each pixel goes to the surviving query maximizing
/// `score · mask_prob`, void when that mask probability is not above the mask
/// threshold. Stuff queries of one category merge into one segment; segments
/// smaller than `min_area` become void.
pub fn panoptic_postprocess(
    pred: &SegPrediction,
    table: &CategoryTable,
    out_h: usize,
    out_w: usize,
    cfg: &PostprocessConfig,
) -> PanopticResult {
    let n = pred.num_queries();
    let k = pred.num_classes();
    let mut confidence = Vec::with_capacity(n);
    let mut candidates = Vec::new();
    for i in 0..n {
        let row = pred.class_probs.row(i);
        let (mut best, mut best_p) = (0, row[0]);
        for (c, &p) in row.iter().enumerate().take(k).skip(1) {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        confidence.push(best_p);
        let argmax_all = if row[k] > best_p { k } else { best };
        if best_p >= cfg.score_threshold && argmax_all != k {
            candidates.push((i, best, best_p));
        }
    }

    let npix = out_h * out_w;
    let probs: Vec<Vec<f64>> = candidates
        .iter()
        .map(|&(i, _, _)| {
            resize_plane(pred.mask_logits.row(i), pred.height, pred.width, out_h, out_w)
                .into_iter()
                .map(sigmoid_scalar)
                .collect()
        })
        .collect();
    let mut winner: Vec<Option<usize>> = vec![None; npix];
    for p in 0..npix {
        let mut best: Option<(usize, f64)> = None;
        for (ci, &(_, _, score)) in candidates.iter().enumerate() {
            let v = score * probs[ci][p];
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((ci, v));
            }
        }
        if let Some((ci, _)) = best {
            if probs[ci][p] > cfg.mask_threshold {
                winner[p] = Some(ci);
            }
        }
    }

    // Segment key: stuff merges by category, things stay per query.
    #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
    enum Key {
        Stuff(u32),
        Thing(usize),
    }
    let category_of = |ci: usize| table.categories[candidates[ci].1].id;
    let key_of = |ci: usize| {
        let cat = category_of(ci);
        if table.is_thing(cat) {
            Key::Thing(ci)
        } else {
            Key::Stuff(cat)
        }
    };
    let mut area: BTreeMap<Key, usize> = BTreeMap::new();
    for w in winner.iter().flatten() {
        *area.entry(key_of(*w)).or_insert(0) += 1;
    }
    let mut ids: BTreeMap<Key, u32> = BTreeMap::new();
    let mut segments = Vec::new();
    let mut instances: BTreeMap<u32, u32> = BTreeMap::new();
    // Assign ids in order of first appearance by candidate index.
    for ci in 0..candidates.len() {
        let key = key_of(ci);
        if ids.contains_key(&key) || area.get(&key).copied().unwrap_or(0) < cfg.min_area.max(1) {
            continue;
        }
        let cat = category_of(ci);
        let is_thing = table.is_thing(cat);
        let id = if is_thing {
            let inst = instances.entry(cat).or_insert(0);
            *inst += 1;
            PanopticMap::encode_id(cat, *inst)
        } else {
            PanopticMap::encode_id(cat, 0)
        };
        ids.insert(key, id);
        segments.push(SegmentInfo {
            id,
            category_id: cat,
            is_thing,
        });
    }
    let mut map_ids = vec![0u32; npix];
    let mut owner = vec![None; npix];
    let mut kept = std::collections::BTreeSet::new();
    for p in 0..npix {
        if let Some(ci) = winner[p] {
            if let Some(&id) = ids.get(&key_of(ci)) {
                map_ids[p] = id;
                owner[p] = Some(candidates[ci].0);
                kept.insert(candidates[ci].0);
            }
        }
    }
    PanopticResult {
        panoptic: PanopticMap {
            height: out_h,
            width: out_w,
            ids: map_ids,
            segments,
        },
        kept_query_ids: kept.into_iter().collect(),
        per_query_confidence: confidence,
        owner,
    }
}
