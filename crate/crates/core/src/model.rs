//! Full network: encoder, segmentation decoder and geometry branch, with a
//! single forward pass, the matching backward pass, and inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    aggregate_depth, backup_backward, backup_depth, backward_enhance, depth_head, depth_head_backward, enhance_queries,
    AggregateOptions, BackupCache, DepthHeadCache, Enhanced, GeometryParams,
};
use crate::losses::OutputGrads;
use crate::nn::Params;
use crate::numerics::{Rng, Tensor};
use crate::scene::{CategoryTable, DepthMap, EncoderOutput, EncoderParams};
use crate::segmentation::{
    backward_segmentation, forward_segmentation, panoptic_postprocess, PanopticResult, PostprocessConfig, SegForward,
    SegOutputGrads, SegmentationParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// Pixel embedding width `C_e`.
    pub pixel_dim: usize,
    /// Depth embedding width `C_d`.
    pub depth_dim: usize,
    pub queries: usize,
    pub latents: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub max_depth: f64,
    pub enable_enhancement: bool,
    pub enable_backup: bool,
    /// Per-segment depth maps; when off, depth comes from the backup query
    /// alone.
    pub enable_instance_depth: bool,
    pub postprocess: PostprocessConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            pixel_dim: 32,
            depth_dim: 32,
            queries: 20,
            latents: 32,
            layers: 9,
            ffn_hidden: 128,
            max_depth: crate::scene::DEFAULT_MAX_DEPTH,
            enable_enhancement: true,
            enable_backup: true,
            enable_instance_depth: true,
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::config(format!("channels must be even and positive, got {}", self.channels)));
        }
        if self.queries == 0 || self.layers == 0 || self.latents == 0 || self.pixel_dim == 0 || self.depth_dim == 0 {
            return Err(Error::config("queries, layers, latents and embedding widths must be positive"));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::config("max_depth must be positive"));
        }
        if !self.enable_backup && !self.enable_instance_depth {
            return Err(Error::config("at least one of enable_backup and enable_instance_depth is required"));
        }
        Ok(())
    }

    fn uses_backup(&self) -> bool {
        self.enable_backup || !self.enable_instance_depth
    }

    fn aggregate_options(&self) -> AggregateOptions {
        AggregateOptions {
            instance_depth: self.enable_instance_depth,
            backup: self.uses_backup(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub segmentation: SegmentationParams,
    pub geometry: GeometryParams,
}

impl Params for Model {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.encoder.visit(f);
        self.segmentation.visit(f);
        self.geometry.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.encoder.visit_mut(f);
        self.segmentation.visit_mut(f);
        self.geometry.visit_mut(f);
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            encoder: EncoderParams::new(c, cfg.pixel_dim, cfg.depth_dim, &mut rng.fork(1)),
            segmentation: SegmentationParams::new(
                cfg.queries,
                c,
                cfg.ffn_hidden,
                cfg.layers,
                classes,
                cfg.pixel_dim,
                &mut rng.fork(2),
            ),
            geometry: GeometryParams::new(cfg.latents, c, cfg.ffn_hidden, cfg.depth_dim, &mut rng.fork(3)),
        })
    }
}

pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    pub seg: SegForward,
    pub enhanced: Option<Enhanced>,
    /// `[N, h4*w4]` per-segment depth in meters.
    pub segment_depth: Option<Tensor>,
    segment_head: Option<DepthHeadCache>,
    /// `[1, h4*w4]`
    pub backup_depth: Option<Tensor>,
    backup_cache: Option<BackupCache>,
}

pub fn forward(model: &Model, cfg: &ModelConfig, image: &Tensor) -> Result<ForwardOutput> {
    let encoder = model.encoder.forward(image)?;
    let seg = forward_segmentation(&encoder.semantic, &model.segmentation);
    let geo = &model.geometry;
    let e_depth = &encoder.depth.embedding.tokens;
    let (enhanced, segment_depth, segment_head) = if cfg.enable_instance_depth {
        let enhanced = cfg
            .enable_enhancement
            .then(|| enhance_queries(&seg.queries, geo, &encoder.depth, seg.final_prediction()));
        let x_d = enhanced.as_ref().map_or(&seg.queries, |e| &e.queries);
        let (d, cache) = depth_head(geo, x_d, e_depth, cfg.max_depth);
        (enhanced, Some(d), Some(cache))
    } else {
        (None, None, None)
    };
    let (backup_depth, backup_cache) = if cfg.uses_backup() {
        let (d, c) = backup_depth(geo, &encoder.depth, cfg.max_depth);
        (Some(d), Some(c))
    } else {
        (None, None)
    };
    Ok(ForwardOutput {
        encoder,
        seg,
        enhanced,
        segment_depth,
        segment_head,
        backup_depth,
        backup_cache,
    })
}

/// Accumulates parameter gradients of the loss whose output gradients are
/// `grads`.
pub fn backward(model: &Model, cfg: &ModelConfig, out: &ForwardOutput, grads: &OutputGrads, acc: &mut Model) {
    let geo = &model.geometry;
    let pyr_d = &out.encoder.depth;
    let e_depth = &pyr_d.embedding.tokens;
    let mut d_depth_levels: Vec<Tensor> = pyr_d.levels.iter().map(|l| Tensor::zeros(l.tokens.shape())).collect();
    let mut d_depth_embed = Tensor::zeros(e_depth.shape());

    let mut d_queries = None;
    if let (Some(dd), Some(d), Some(cache)) = (&grads.segment_depth, &out.segment_depth, &out.segment_head) {
        let dx_d = depth_head_backward(geo, cache, e_depth, d, dd, cfg.max_depth, &mut acc.geometry, &mut d_depth_embed);
        d_queries = Some(match &out.enhanced {
            Some(enh) => backward_enhance(geo, &enh.cache, &dx_d, &mut acc.geometry, &mut d_depth_levels),
            None => dx_d,
        });
    }
    if let (Some(db), Some(b), Some(cache)) = (&grads.backup_depth, &out.backup_depth, &out.backup_cache) {
        backup_backward(
            geo,
            cache,
            pyr_d,
            b,
            db,
            cfg.max_depth,
            &mut acc.geometry,
            &mut d_depth_levels,
            &mut d_depth_embed,
        );
    }

    let seg_grads = SegOutputGrads {
        predictions: grads.predictions.clone(),
        queries: d_queries,
    };
    let (mut d_sem_levels, d_pixel) = backward_segmentation(
        &out.encoder.semantic,
        &model.segmentation,
        &out.seg,
        &seg_grads,
        &mut acc.segmentation,
    );
    for (d, g) in d_sem_levels.iter_mut().zip(&grads.semantic_levels) {
        if let Some(g) = g {
            d.add_assign(g);
        }
    }
    for (d, g) in d_depth_levels.iter_mut().zip(&grads.depth_levels) {
        if let Some(g) = g {
            d.add_assign(g);
        }
    }
    let wrap = |v: Vec<Tensor>| v.into_iter().map(Some).collect::<Vec<_>>();
    model.encoder.backward(
        &out.encoder.cache,
        &wrap(d_sem_levels),
        &wrap(d_depth_levels),
        &d_pixel,
        &d_depth_embed,
        &mut acc.encoder,
    );
}

/// Inference output at full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub panoptic: PanopticResult,
    pub depth: DepthMap,
}

pub fn predict_from(out: &ForwardOutput, cfg: &ModelConfig, table: &CategoryTable, height: usize, width: usize) -> Prediction {
    let pred = out.seg.final_prediction();
    let panoptic = panoptic_postprocess(pred, table, height, width, &cfg.postprocess);
    let p4 = pred.height * pred.width;
    let backup: Vec<f64> = match &out.backup_depth {
        Some(b) => b.data().to_vec(),
        None => vec![cfg.max_depth * 0.5; p4],
    };
    let per_segment = out
        .segment_depth
        .clone()
        .unwrap_or_else(|| Tensor::zeros(&[pred.num_queries(), p4]));
    let depth = aggregate_depth(&per_segment, &backup, pred, &panoptic, cfg.aggregate_options());
    Prediction { panoptic, depth }
}

pub fn predict(model: &Model, cfg: &ModelConfig, table: &CategoryTable, image: &Tensor) -> Result<Prediction> {
    let out = forward(model, cfg, image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Ok(predict_from(&out, cfg, table, h, w))
}
