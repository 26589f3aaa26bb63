//! Geometry branch: latent middleware that injects depth features into the
//! per-segment queries, per-segment depth maps, the unconstrained backup
//! query and full-resolution depth aggregation.

use serde::{Deserialize, Serialize};

use crate::nn::{Attention, AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Mlp, MlpCache, Params};
use crate::numerics::{matmul_nt, matmul_tn, matmul_unchecked, sigmoid_scalar, AttnMask, Rng, Tensor};
use crate::scene::resample::{nearest_bool, resize_plane};
use crate::scene::{DepthMap, FeaturePyramid};
use crate::segmentation::{level_keys, PanopticResult, SegPrediction, LEVEL_ORDER};

/// One enhancement round over a single depth level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceBlock {
    pub latent_cross: Attention,
    pub latent_self: Attention,
    pub query_cross: Attention,
}

impl EnhanceBlock {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        Self {
            latent_cross: Attention::new(width, rng),
            latent_self: Attention::new(width, rng),
            query_cross: Attention::new(width, rng),
        }
    }
}

impl Params for EnhanceBlock {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.latent_cross.visit(f);
        self.latent_self.visit(f);
        self.query_cross.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.latent_cross.visit_mut(f);
        self.latent_self.visit_mut(f);
        self.query_cross.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    /// `[M, C]` initial latent tokens.
    pub latent_init: Tensor,
    pub blocks: Vec<EnhanceBlock>,
    /// `[1, C]`
    pub backup_init: Tensor,
    pub backup_cross: Vec<Attention>,
    pub backup_ffn: FeedForward,
    pub depth_norm: LayerNorm,
    /// Maps queries to the depth-embedding space.
    pub psi: Mlp,
}

impl GeometryParams {
    pub fn new(latents: usize, width: usize, hidden: usize, depth_dim: usize, rng: &mut Rng) -> Self {
        Self {
            latent_init: Tensor::from_fn(&[latents, width], |_| rng.normal()),
            blocks: (0..LEVEL_ORDER.len()).map(|_| EnhanceBlock::new(width, rng)).collect(),
            backup_init: Tensor::from_fn(&[1, width], |_| rng.normal()),
            backup_cross: (0..LEVEL_ORDER.len()).map(|_| Attention::new(width, rng)).collect(),
            backup_ffn: FeedForward::new(width, hidden, rng),
            depth_norm: LayerNorm::new(width),
            psi: Mlp::new(&[width, width, depth_dim], rng),
        }
    }
}

impl Params for GeometryParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.latent_init);
        self.blocks.visit(f);
        f(&self.backup_init);
        self.backup_cross.visit(f);
        self.backup_ffn.visit(f);
        self.depth_norm.visit(f);
        self.psi.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.latent_init);
        self.blocks.visit_mut(f);
        f(&mut self.backup_init);
        self.backup_cross.visit_mut(f);
        self.backup_ffn.visit_mut(f);
        self.depth_norm.visit_mut(f);
        self.psi.visit_mut(f);
    }
}

/// Union over queries of the binarized mask logits, resampled to a level.
pub fn union_mask(pred: &SegPrediction, level_h: usize, level_w: usize) -> Vec<bool> {
    let mut fg = vec![false; pred.height * pred.width];
    for i in 0..pred.num_queries() {
        for (u, &v) in fg.iter_mut().zip(pred.mask_logits.row(i)) {
            *u |= v > 0.0;
        }
    }
    nearest_bool(&fg, pred.height, pred.width, level_h, level_w)
}

struct BlockCache {
    level: usize,
    latent_cross: AttentionCache,
    latent_self: AttentionCache,
    query_cross: AttentionCache,
}

pub struct EnhanceCache {
    blocks: Vec<BlockCache>,
}

pub struct Enhanced {
    pub queries: Tensor,
    pub latent: Tensor,
    pub cache: EnhanceCache,
}

/// Runs the enhancement blocks coarse to fine. `x_o` is read, never written;
/// the returned queries start from a copy of it.
pub fn enhance_queries(
    x_o: &Tensor,
    params: &GeometryParams,
    depth: &FeaturePyramid,
    masks: &SegPrediction,
) -> Enhanced {
    let mut latent = params.latent_init.clone();
    let mut x_d = x_o.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (b, block) in params.blocks.iter().enumerate() {
        let lvl = LEVEL_ORDER[b % LEVEL_ORDER.len()];
        let level = &depth.levels[lvl];
        let keys = level_keys(level);
        let allowed = union_mask(masks, level.height, level.width);
        let mask = AttnMask::broadcast(latent.rows(), &allowed);
        let (l1, latent_cross) = block.latent_cross.forward_cross(&latent, &keys, &level.tokens, Some(&mask));
        let (l2, latent_self) = block.latent_self.forward_self(&l1);
        let (xq, query_cross) = block.query_cross.forward_cross(&x_d, &l2, &l2, None);
        latent = l2;
        x_d = xq;
        blocks.push(BlockCache {
            level: lvl,
            latent_cross,
            latent_self,
            query_cross,
        });
    }
    Enhanced {
        queries: x_d,
        latent,
        cache: EnhanceCache { blocks },
    }
}

/// Returns the gradient on `x_o` and accumulates depth-level gradients.
pub fn backward_enhance(
    params: &GeometryParams,
    cache: &EnhanceCache,
    d_queries: &Tensor,
    grad: &mut GeometryParams,
    d_levels: &mut [Tensor],
) -> Tensor {
    let mut dx = d_queries.clone();
    let mut dlatent = Tensor::zeros(params.latent_init.shape());
    for (b, bc) in cache.blocks.iter().enumerate().rev() {
        let block = &params.blocks[b];
        let g = &mut grad.blocks[b];
        let (dxq, mem) = block.query_cross.backward(&bc.query_cross, &dx, &mut g.query_cross);
        dx = dxq;
        let mem = mem.expect("memory gradient");
        dlatent.add_assign(&mem.keys);
        dlatent.add_assign(&mem.values);
        let (dl1, _) = block.latent_self.backward(&bc.latent_self, &dlatent, &mut g.latent_self);
        let (dl0, mem) = block.latent_cross.backward(&bc.latent_cross, &dl1, &mut g.latent_cross);
        let mem = mem.expect("memory gradient");
        d_levels[bc.level].add_assign(&mem.keys);
        d_levels[bc.level].add_assign(&mem.values);
        dlatent = dl0;
    }
    grad.latent_init.add_assign(&dlatent);
    dx
}

pub struct DepthHeadCache {
    ln: LayerNormCache,
    mlp: MlpCache,
    embed: Tensor,
}

/// `D_max · σ(ψ(LN(x)) · E_depthᵀ)`, one row per query, `[N, h4*w4]`.
pub fn depth_head(params: &GeometryParams, x: &Tensor, e_depth: &Tensor, max_depth: f64) -> (Tensor, DepthHeadCache) {
    let (xn, ln) = params.depth_norm.forward(x);
    let (embed, mlp) = params.psi.forward(&xn);
    let depth = matmul_nt(&embed, e_depth).map(|z| max_depth * sigmoid_scalar(z));
    (depth, DepthHeadCache { ln, mlp, embed })
}

/// Backward of [`depth_head`] given the depth output and its gradient.
pub fn depth_head_backward(
    params: &GeometryParams,
    cache: &DepthHeadCache,
    e_depth: &Tensor,
    depth: &Tensor,
    d_depth: &Tensor,
    max_depth: f64,
    grad: &mut GeometryParams,
    d_embed_depth: &mut Tensor,
) -> Tensor {
    let mut dz = d_depth.clone();
    for (g, &d) in dz.data_mut().iter_mut().zip(depth.data()) {
        *g *= d * (1.0 - d / max_depth);
    }
    d_embed_depth.add_assign(&matmul_tn(&dz, &cache.embed));
    let de = matmul_unchecked(&dz, e_depth);
    let dxn = params.psi.backward(&cache.mlp, &de, &mut grad.psi);
    params.depth_norm.backward(&cache.ln, &dxn, &mut grad.depth_norm)
}

pub struct BackupCache {
    steps: Vec<(usize, AttentionCache)>,
    ffn: FeedForwardCache,
    head: DepthHeadCache,
}

/// Backup query: unmasked reads of every depth level, an FFN, then the
/// shared depth head. Returns `[1, h4*w4]`.
pub fn backup_depth(params: &GeometryParams, depth: &FeaturePyramid, max_depth: f64) -> (Tensor, BackupCache) {
    let mut q = params.backup_init.clone();
    let mut steps = Vec::with_capacity(params.backup_cross.len());
    for (b, attn) in params.backup_cross.iter().enumerate() {
        let lvl = LEVEL_ORDER[b % LEVEL_ORDER.len()];
        let level = &depth.levels[lvl];
        let (next, c) = attn.forward_cross(&q, &level_keys(level), &level.tokens, None);
        q = next;
        steps.push((lvl, c));
    }
    let (q, ffn) = params.backup_ffn.forward(&q);
    let (d, head) = depth_head(params, &q, &depth.embedding.tokens, max_depth);
    (d, BackupCache { steps, ffn, head })
}

pub fn backup_backward(
    params: &GeometryParams,
    cache: &BackupCache,
    depth_pyr: &FeaturePyramid,
    depth: &Tensor,
    d_depth: &Tensor,
    max_depth: f64,
    grad: &mut GeometryParams,
    d_levels: &mut [Tensor],
    d_embed_depth: &mut Tensor,
) {
    let dq = depth_head_backward(
        params,
        &cache.head,
        &depth_pyr.embedding.tokens,
        depth,
        d_depth,
        max_depth,
        grad,
        d_embed_depth,
    );
    let mut dq = params.backup_ffn.backward(&cache.ffn, &dq, &mut grad.backup_ffn);
    for (b, (lvl, c)) in cache.steps.iter().enumerate().rev() {
        let (dprev, mem) = params.backup_cross[b].backward(c, &dq, &mut grad.backup_cross[b]);
        let mem = mem.expect("memory gradient");
        d_levels[*lvl].add_assign(&mem.keys);
        d_levels[*lvl].add_assign(&mem.values);
        dq = dprev;
    }
    grad.backup_init.add_assign(&dq);
}

/// Which source fills each output pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Use per-segment depth for owned pixels; otherwise the backup map
    /// everywhere.
    pub instance_depth: bool,
    /// Fill unowned pixels from the backup map; otherwise from the query
    /// with the highest mask probability at that pixel.
    pub backup: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            instance_depth: true,
            backup: true,
        }
    }
}

/// Full-resolution depth: owned pixels take their owner's map, the rest
/// take the backup map. Maps are bilinearly upsampled from the 1/4 grid.
pub fn aggregate_depth(
    per_segment: &Tensor,
    backup: &[f64],
    masks: &SegPrediction,
    pan: &PanopticResult,
    opts: AggregateOptions,
) -> DepthMap {
    let (h, w) = (pan.panoptic.height, pan.panoptic.width);
    let (h4, w4) = (masks.height, masks.width);
    let up = |plane: &[f64]| resize_plane(plane, h4, w4, h, w);
    let backup_up = up(backup);
    let mut depth = if opts.backup || !opts.instance_depth {
        backup_up
    } else {
        // Hole fill from the most confident mask at each pixel.
        let n = masks.num_queries();
        let logits: Vec<Vec<f64>> = (0..n).map(|i| up(masks.mask_logits.row(i))).collect();
        let maps: Vec<Vec<f64>> = (0..n).map(|i| up(per_segment.row(i))).collect();
        (0..h * w)
            .map(|p| {
                let mut best = 0;
                for i in 1..n {
                    if logits[i][p] > logits[best][p] {
                        best = i;
                    }
                }
                if n == 0 {
                    backup_up[p]
                } else {
                    maps[best][p]
                }
            })
            .collect()
    };
    if opts.instance_depth {
        let mut cached: Vec<Option<Vec<f64>>> = vec![None; per_segment.rows()];
        for (p, owner) in pan.owner.iter().enumerate() {
            if let Some(i) = *owner {
                let map = cached[i].get_or_insert_with(|| up(per_segment.row(i)));
                depth[p] = map[p];
            }
        }
    }
    DepthMap::dense(h, w, depth)
}
