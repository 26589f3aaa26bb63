use serde::{Deserialize, Serialize};

use super::resample::{avg_pool2, avg_pool2_backward, resize_tokens, resize_tokens_backward};
use crate::error::{Error, Result};
use crate::nn::{Linear, Params};
use crate::numerics::{matmul_tn, matmul_unchecked, Rng, Tensor};

pub const PATCH: usize = 8;
/// Pyramid strides, finest first.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];
/// Width of the fixed coordinate features feeding the embedding heads.
pub const COORD_FEATURES: usize = 16;

/// One pyramid level stored as tokens `[h*w, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    pub height: usize,
    pub width: usize,
    pub tokens: Tensor,
}

impl FeatureLevel {
    /// Channel-first view `[C, h, w]`.
    pub fn to_chw(&self) -> Tensor {
        let t = self.tokens.transpose();
        let c = t.rows();
        t.reshape(&[c, self.height, self.width]).expect("level shape")
    }
}

/// Three feature levels (strides 8, 16, 32) plus the stride-4 embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
    pub embedding: FeatureLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// Flattened 8×8×3 patch → base features.
    pub patch: Linear,
    pub semantic: Vec<Linear>,
    pub depth: Vec<Linear>,
    pub pixel_embed: Linear,
    pub pixel_coord: Tensor,
    pub depth_embed: Linear,
    pub depth_coord: Tensor,
}

impl Params for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.patch.visit(f);
        self.semantic.visit(f);
        self.depth.visit(f);
        self.pixel_embed.visit(f);
        f(&self.pixel_coord);
        self.depth_embed.visit(f);
        f(&self.depth_coord);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.patch.visit_mut(f);
        self.semantic.visit_mut(f);
        self.depth.visit_mut(f);
        self.pixel_embed.visit_mut(f);
        f(&mut self.pixel_coord);
        self.depth_embed.visit_mut(f);
        f(&mut self.depth_coord);
    }
}

pub type EncoderGrads = EncoderParams;

pub struct EncoderCache {
    patches: Tensor,
    base: Vec<Tensor>,
    up: Tensor,
    coords: Tensor,
    dims: Vec<(usize, usize)>,
    embed_dims: (usize, usize),
}

pub struct EncoderOutput {
    pub semantic: FeaturePyramid,
    pub depth: FeaturePyramid,
    pub cache: EncoderCache,
}

/// DETR-style 2-D sinusoidal encoding `[h*w, c]`: first half of the channels
/// encode `y`, second half `x`.
pub fn sine_position(h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let mut out = Tensor::zeros(&[h * w, c]);
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            for (axis, coord) in [(0, (y as f64 + 0.5) / h as f64), (1, (x as f64 + 0.5) / w as f64)] {
                let angle = coord * std::f64::consts::TAU;
                for i in 0..half {
                    let freq = 10000f64.powf(-((2 * (i / 2)) as f64) / half as f64);
                    row[axis * half + i] = if i % 2 == 0 {
                        (angle * freq * 8.0).sin()
                    } else {
                        (angle * freq * 8.0).cos()
                    };
                }
            }
        }
    }
    out
}

/// Low-frequency coordinate features `[h*w, 16]` (sin/cos of x and y at four
/// frequencies).
pub fn coord_features(h: usize, w: usize) -> Tensor {
    let freqs = [0.5, 1.0, 2.0, 4.0];
    let mut out = Tensor::zeros(&[h * w, COORD_FEATURES]);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let row = out.row_mut(y * w + x);
            for (k, f) in freqs.iter().enumerate() {
                let a = std::f64::consts::TAU * f;
                row[4 * k] = (a * u).sin();
                row[4 * k + 1] = (a * u).cos();
                row[4 * k + 2] = (a * v).sin();
                row[4 * k + 3] = (a * v).cos();
            }
        }
    }
    out
}

fn extract_patches(image: &Tensor) -> Result<(Tensor, usize, usize)> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("image must be [3,H,W], got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "image height and width must be multiples of 32, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / PATCH, w / PATCH);
    let dim = 3 * PATCH * PATCH;
    let mut patches = Tensor::zeros(&[ph * pw, dim]);
    let d = image.data();
    for py in 0..ph {
        for px in 0..pw {
            let row = patches.row_mut(py * pw + px);
            for ch in 0..3 {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        row[ch * PATCH * PATCH + dy * PATCH + dx] =
                            d[ch * h * w + (py * PATCH + dy) * w + px * PATCH + dx];
                    }
                }
            }
        }
    }
    Ok((patches, ph, pw))
}

impl EncoderParams {
    pub fn new(channels: usize, pixel_dim: usize, depth_dim: usize, rng: &mut Rng) -> Self {
        Self {
            patch: Linear::new(3 * PATCH * PATCH, channels, rng),
            semantic: (0..3).map(|_| Linear::new(channels, channels, rng)).collect(),
            depth: (0..3).map(|_| Linear::new(channels, channels, rng)).collect(),
            pixel_embed: Linear::new(channels, pixel_dim, rng),
            pixel_coord: Linear::new(COORD_FEATURES, pixel_dim, rng).weight,
            depth_embed: Linear::new(channels, depth_dim, rng),
            depth_coord: Linear::new(COORD_FEATURES, depth_dim, rng).weight,
        }
    }

    pub fn channels(&self) -> usize {
        self.patch.weight.cols()
    }

    /// Zeroes every additive term that does not depend on the image: biases
    /// and the coordinate projections.
    pub fn zero_biases(&mut self) {
        self.patch.bias.fill(0.0);
        for l in self.semantic.iter_mut().chain(self.depth.iter_mut()) {
            l.bias.fill(0.0);
        }
        self.pixel_embed.bias.fill(0.0);
        self.depth_embed.bias.fill(0.0);
        self.pixel_coord.fill(0.0);
        self.depth_coord.fill(0.0);
    }

    pub fn forward(&self, image: &Tensor) -> Result<EncoderOutput> {
        let (patches, ph, pw) = extract_patches(image)?;
        let mut dims = vec![(ph, pw)];
        let mut base = vec![self.patch.forward(&patches)];
        for l in 1..LEVEL_STRIDES.len() {
            let (h, w) = dims[l - 1];
            base.push(avg_pool2(&base[l - 1], h, w));
            dims.push((h / 2, w / 2));
        }
        let level = |proj: &Linear, l: usize| FeatureLevel {
            height: dims[l].0,
            width: dims[l].1,
            tokens: proj.forward(&base[l]),
        };
        let semantic_levels: Vec<_> = (0..3).map(|l| level(&self.semantic[l], l)).collect();
        let depth_levels: Vec<_> = (0..3).map(|l| level(&self.depth[l], l)).collect();

        let (eh, ew) = (2 * ph, 2 * pw);
        let up = resize_tokens(&base[0], ph, pw, eh, ew);
        let coords = coord_features(eh, ew);
        let mut pixel = self.pixel_embed.forward(&up);
        pixel.add_assign(&matmul_unchecked(&coords, &self.pixel_coord));
        let mut depth = self.depth_embed.forward(&up);
        depth.add_assign(&matmul_unchecked(&coords, &self.depth_coord));

        let embed = |tokens| FeatureLevel {
            height: eh,
            width: ew,
            tokens,
        };
        Ok(EncoderOutput {
            semantic: FeaturePyramid {
                levels: semantic_levels,
                embedding: embed(pixel),
            },
            depth: FeaturePyramid {
                levels: depth_levels,
                embedding: embed(depth),
            },
            cache: EncoderCache {
                patches,
                base,
                up,
                coords,
                dims,
                embed_dims: (eh, ew),
            },
        })
    }

    /// Accumulates parameter gradients given gradients on every pyramid
    /// output. Level gradients may be `None` when nothing reads that level.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_semantic: &[Option<Tensor>],
        d_depth: &[Option<Tensor>],
        d_pixel: &Tensor,
        d_depth_embed: &Tensor,
        grad: &mut EncoderParams,
    ) {
        let mut dup = self.pixel_embed.backward(&cache.up, d_pixel, &mut grad.pixel_embed);
        dup.add_assign(&self.depth_embed.backward(&cache.up, d_depth_embed, &mut grad.depth_embed));
        grad.pixel_coord.add_assign(&matmul_tn(&cache.coords, d_pixel));
        grad.depth_coord.add_assign(&matmul_tn(&cache.coords, d_depth_embed));

        let (ph, pw) = cache.dims[0];
        let (eh, ew) = cache.embed_dims;
        let mut dbase: Vec<Tensor> = cache.base.iter().map(|b| Tensor::zeros(b.shape())).collect();
        dbase[0] = resize_tokens_backward(&dup, ph, pw, eh, ew);
        for l in 0..3 {
            if let Some(d) = &d_semantic[l] {
                let g = self.semantic[l].backward(&cache.base[l], d, &mut grad.semantic[l]);
                dbase[l].add_assign(&g);
            }
            if let Some(d) = &d_depth[l] {
                let g = self.depth[l].backward(&cache.base[l], d, &mut grad.depth[l]);
                dbase[l].add_assign(&g);
            }
        }
        for l in (1..3).rev() {
            let (h, w) = cache.dims[l - 1];
            let back = avg_pool2_backward(&dbase[l], h, w);
            dbase[l - 1].add_assign(&back);
        }
        self.patch
            .backward_params(&cache.patches, &dbase[0], &mut grad.patch);
    }
}
