//! Synthetic scenes: panoptic ground truth, planar per-segment depth and a
//! rendered image, plus the patch-embedding encoder that turns an image into
//! semantic and depth feature pyramids.

mod encoder;
mod io;
pub mod resample;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub use encoder::{
    coord_features, sine_position, EncoderCache, EncoderGrads, EncoderOutput, EncoderParams, FeatureLevel,
    FeaturePyramid, COORD_FEATURES, LEVEL_STRIDES, PATCH,
};
pub(crate) use io::{read_json, write_json};
pub use io::{
    read_dataset, read_depth_png, read_meta, read_panoptic_png, read_scene, scene_name, write_dataset,
    write_depth_png, write_panoptic, write_scene, Manifest, SceneMeta,
};

/// Maximum representable depth in meters.
pub const DEFAULT_MAX_DEPTH: f64 = 80.0;
/// Depth PNG quantization: stored value = meters × 256.
pub const DEPTH_SCALE: f64 = 256.0;
/// Panoptic id = category × 1000 + instance.
pub const ID_DIVISOR: u32 = 1000;
/// Geometry snaps to this grid so label maps are exact at 1/4 resolution.
pub const SNAP: usize = 4;

pub const IMAGE_NOISE_SIGMA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    Full,
    PanopticOnly,
    DepthOnly,
}

impl AnnotationMode {
    pub fn has_panoptic(self) -> bool {
        !matches!(self, AnnotationMode::DepthOnly)
    }

    pub fn has_depth(self) -> bool {
        !matches!(self, AnnotationMode::PanopticOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
    pub color: [f64; 3],
}

/// Four stuff and four thing categories; colors sit on distinct corners of
/// a shrunken RGB cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub categories: Vec<Category>,
}

impl Default for CategoryTable {
    fn default() -> Self {
        let spec: [(&str, bool, [u8; 3]); 8] = [
            ("sky", false, [0, 0, 1]),
            ("building", false, [1, 0, 1]),
            ("vegetation", false, [0, 1, 0]),
            ("road", false, [0, 0, 0]),
            ("car", true, [1, 0, 0]),
            ("person", true, [1, 1, 0]),
            ("truck", true, [0, 1, 1]),
            ("bicycle", true, [1, 1, 1]),
        ];
        let categories = spec
            .iter()
            .enumerate()
            .map(|(i, (name, is_thing, corner))| Category {
                id: i as u32 + 1,
                name: (*name).to_string(),
                is_thing: *is_thing,
                color: corner.map(|c| 0.2 + 0.7 * f64::from(c)),
            })
            .collect();
        Self { categories }
    }
}

impl CategoryTable {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// Model class index (0-based) of a category id.
    pub fn class_index(&self, id: u32) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn is_thing(&self, id: u32) -> bool {
        self.get(id).is_some_and(|c| c.is_thing)
    }

    pub fn stuff_ids(&self) -> Vec<u32> {
        self.categories.iter().filter(|c| !c.is_thing).map(|c| c.id).collect()
    }

    pub fn thing_ids(&self) -> Vec<u32> {
        self.categories.iter().filter(|c| c.is_thing).map(|c| c.id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub category_id: u32,
    pub is_thing: bool,
}

/// Per-pixel segment ids (0 = void) plus the segment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
}

impl PanopticMap {
    pub fn void(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![0; height * width],
            segments: Vec::new(),
        }
    }

    pub fn encode_id(category_id: u32, instance: u32) -> u32 {
        category_id * ID_DIVISOR + instance
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Pixel count per segment id (void excluded), keyed in id order.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &id in &self.ids {
            if id != 0 {
                *out.entry(id).or_insert(0) += 1;
            }
        }
        out
    }

    /// Checks that every nonzero id has exactly one segment entry and that
    /// segment ids are unique.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.height * self.width {
            return Err(Error::shape(format!(
                "panoptic map {}x{} has {} ids",
                self.height,
                self.width,
                self.ids.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.segments {
            if s.id == 0 || !seen.insert(s.id) {
                return Err(Error::parse(
                    "segments",
                    format!("segment id {} is void or duplicated", s.id),
                ));
            }
        }
        for id in self.areas().keys() {
            if !seen.contains(id) {
                return Err(Error::parse(
                    "segments",
                    format!("id {id} present in map but absent from segments"),
                ));
            }
        }
        Ok(())
    }
}

/// Metric depth with a validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn dense(height: usize, width: usize, depth: Vec<f64>) -> Self {
        let valid = vec![true; depth.len()];
        Self {
            height,
            width,
            depth,
            valid,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Rounds to the 16-bit PNG grid (1/256 m).
    pub fn quantize(v: f64) -> f64 {
        (v * DEPTH_SCALE).round() / DEPTH_SCALE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, H, W]`, values in `[0, 1]` on the 8-bit grid.
    pub image: Tensor,
    pub panoptic_gt: PanopticMap,
    pub depth_gt: DepthMap,
    pub annotation_mode: AnnotationMode,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.panoptic_gt.height
    }

    pub fn width(&self) -> usize {
        self.panoptic_gt.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Number of thing instances, `0..=8`.
    pub things: usize,
    /// Number of horizontal stuff bands, `1..=4`.
    pub stuff_bands: usize,
    /// Fraction of pixels that keep a depth annotation, `(0, 1]`.
    pub sparsity: f64,
    pub max_depth: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            things: 3,
            stuff_bands: 2,
            sparsity: 1.0,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::config(format!(
                "scene height and width must be positive multiples of 32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.things > 8 {
            return Err(Error::config(format!(
                "things must be in 0..=8, got {}",
                self.things
            )));
        }
        if !(1..=4).contains(&self.stuff_bands) || self.stuff_bands * 8 > self.height {
            return Err(Error::config(format!(
                "stuff_bands must be in 1..=4 (and fit 8-pixel bands), got {}",
                self.stuff_bands
            )));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::config(format!(
                "sparsity must be in (0, 1], got {}",
                self.sparsity
            )));
        }
        if !(self.max_depth > 1.0 && self.max_depth * DEPTH_SCALE <= f64::from(u16::MAX)) {
            return Err(Error::config(format!(
                "max_depth must be in (1, 255], got {}",
                self.max_depth
            )));
        }
        Ok(())
    }
}

/// Planar depth `a + b·u + c·v` in normalized image coordinates.
#[derive(Clone, Copy, Debug)]
struct Plane {
    a: f64,
    b: f64,
    c: f64,
}

impl Plane {
    fn at(&self, x: usize, y: usize, w: usize, h: usize, max_depth: f64) -> f64 {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        (self.a + self.b * u + self.c * v).clamp(1.0, max_depth)
    }
}

/// Brightness falloff with log-depth.
pub fn shading(depth: f64) -> f64 {
    1.0 - 0.15 * depth.ln()
}

fn snapped(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    SNAP * rng.int_range(lo.div_ceil(SNAP), hi / SNAP)
}

struct Thing {
    category_id: u32,
    plane: Plane,
    cover: Vec<bool>,
}

struct Layout {
    stuff_ids: Vec<u32>,
    /// Band row edges, `0 = e0 < e1 < ... = H`.
    cuts: Vec<usize>,
    stuff_planes: Vec<Plane>,
    things: Vec<Thing>,
}

fn layout(config: &SceneConfig, table: &CategoryTable, rng: &mut Rng) -> Layout {
    let (h, w) = (config.height, config.width);
    let n = h * w;

    // Stuff bands: sorted cut rows on the snap grid, at least 8 px apart.
    let mut stuff_ids = table.stuff_ids();
    rng.shuffle(&mut stuff_ids);
    let cuts = loop {
        let mut cuts: Vec<usize> = (1..config.stuff_bands)
            .map(|_| snapped(rng, 8, h - 8))
            .collect();
        cuts.sort_unstable();
        let mut edges = vec![0];
        edges.extend(&cuts);
        edges.push(h);
        if edges.windows(2).all(|e| e[1] >= e[0] + 8) {
            break edges;
        }
    };
    let mut stuff_planes = Vec::new();
    for _ in 0..config.stuff_bands {
        stuff_planes.push(Plane {
            a: rng.uniform_range(45.0, 70.0),
            b: rng.uniform_range(-5.0, 5.0),
            c: rng.uniform_range(-10.0, 5.0),
        });
    }

    // Things: depth offsets on a 5 m ladder with small slopes, so the depth
    // order of any two things is the same at every pixel.
    let mut thing_cats = table.thing_ids();
    rng.shuffle(&mut thing_cats);
    let mut ladder: Vec<usize> = (0..8).collect();
    rng.shuffle(&mut ladder);
    let mut things = Vec::with_capacity(config.things);
    for t in 0..config.things {
        let tw = snapped(rng, 12, (w / 2).max(12));
        let th = snapped(rng, 12, (h / 2).max(12));
        let x0 = snapped(rng, 0, w - tw);
        let y0 = snapped(rng, 0, h - th);
        let ellipse = rng.uniform() < 0.5;
        let plane = Plane {
            a: 6.0 + 5.0 * ladder[t] as f64 + rng.uniform_range(0.0, 1.0),
            b: rng.uniform_range(-1.0, 1.0),
            c: rng.uniform_range(-1.0, 1.0),
        };
        let mut cover = vec![false; n];
        for by in (y0..y0 + th).step_by(SNAP) {
            for bx in (x0..x0 + tw).step_by(SNAP) {
                let inside = if ellipse {
                    let cx = (bx as f64 + SNAP as f64 / 2.0 - x0 as f64) / tw as f64 - 0.5;
                    let cy = (by as f64 + SNAP as f64 / 2.0 - y0 as f64) / th as f64 - 0.5;
                    cx * cx + cy * cy <= 0.25
                } else {
                    true
                };
                if inside {
                    for y in by..by + SNAP {
                        for x in bx..bx + SNAP {
                            cover[y * w + x] = true;
                        }
                    }
                }
            }
        }
        things.push(Thing {
            category_id: thing_cats[t % thing_cats.len()],
            plane,
            cover,
        });
    }
    Layout {
        stuff_ids,
        cuts,
        stuff_planes,
        things,
    }
}

/// Renders one scene. Stuff fills horizontal bands; things are snapped
/// rectangles or ellipses drawn front-to-back by depth.
pub fn generate_scene(config: &SceneConfig, rng: &mut Rng) -> Result<Scene> {
    config.validate()?;
    let table = CategoryTable::default();
    let (h, w) = (config.height, config.width);
    let n = h * w;
    let Layout {
        stuff_ids,
        cuts,
        stuff_planes,
        things,
    } = layout(config, &table, rng);

    // Visibility: nearest covering thing wins, stuff otherwise.
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut depth = vec![0.0; n];
    let mut band_of = vec![0usize; n];
    for y in 0..h {
        let band = cuts.windows(2).position(|e| y >= e[0] && y < e[1]).unwrap();
        for x in 0..w {
            let p = y * w + x;
            band_of[p] = band;
            let mut best: Option<(usize, f64)> = None;
            for (i, t) in things.iter().enumerate() {
                if t.cover[p] {
                    let d = t.plane.at(x, y, w, h, config.max_depth);
                    if best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
            }
            depth[p] = match best {
                Some((i, d)) => {
                    owner[p] = Some(i);
                    d
                }
                None => stuff_planes[band].at(x, y, w, h, config.max_depth),
            };
        }
    }

    // Segment table: stuff bands first, then visible things by instance.
    let mut segments = Vec::new();
    let mut ids = vec![0u32; n];
    let band_ids: Vec<u32> = (0..config.stuff_bands)
        .map(|b| PanopticMap::encode_id(stuff_ids[b], 0))
        .collect();
    for b in 0..config.stuff_bands {
        segments.push(SegmentInfo {
            id: band_ids[b],
            category_id: stuff_ids[b],
            is_thing: false,
        });
    }
    let mut thing_ids = vec![0u32; things.len()];
    let mut instance_count: BTreeMap<u32, u32> = BTreeMap::new();
    for (i, t) in things.iter().enumerate() {
        if owner.iter().any(|o| *o == Some(i)) {
            let inst = instance_count.entry(t.category_id).or_insert(0);
            *inst += 1;
            thing_ids[i] = PanopticMap::encode_id(t.category_id, *inst);
            segments.push(SegmentInfo {
                id: thing_ids[i],
                category_id: t.category_id,
                is_thing: true,
            });
        }
    }
    for p in 0..n {
        ids[p] = match owner[p] {
            Some(i) => thing_ids[i],
            None => band_ids[band_of[p]],
        };
    }
    let depth: Vec<f64> = depth.into_iter().map(DepthMap::quantize).collect();

    let mut image = Tensor::zeros(&[3, h, w]);
    for p in 0..n {
        let cat = ids[p] / ID_DIVISOR;
        let color = table.get(cat).expect("generated category").color;
        let s = shading(depth[p]);
        for (ch, base) in color.iter().enumerate() {
            let v = (base * s + IMAGE_NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0);
            image.data_mut()[ch * n + p] = (v * 255.0).round() / 255.0;
        }
    }

    let mut valid = vec![true; n];
    if config.sparsity < 1.0 {
        let keep = ((config.sparsity * n as f64).round() as usize).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        valid = vec![false; n];
        for &p in &order[..keep] {
            valid[p] = true;
        }
    }
    let depth_gt = DepthMap {
        height: h,
        width: w,
        depth: depth
            .iter()
            .zip(&valid)
            .map(|(&d, &v)| if v { d } else { 0.0 })
            .collect(),
        valid,
    };
    let panoptic_gt = PanopticMap {
        height: h,
        width: w,
        ids,
        segments,
    };
    panoptic_gt.validate()?;
    Ok(Scene {
        image,
        panoptic_gt,
        depth_gt,
        annotation_mode: AnnotationMode::Full,
    })
}

/// Dense depth before sparsification, for tests that need the full field.
#[doc(hidden)]
pub fn generate_dense_depth(config: &SceneConfig, seed: u64) -> Result<DepthMap> {
    let mut dense = config.clone();
    dense.sparsity = 1.0;
    Ok(generate_scene(&dense, &mut Rng::new(seed))?.depth_gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(things: usize, bands: usize) -> SceneConfig {
        SceneConfig {
            things,
            stuff_bands: bands,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn single_stuff_band_covers_image() {
        let s = generate_scene(&cfg(0, 1), &mut Rng::new(1)).unwrap();
        assert_eq!(s.panoptic_gt.segments.len(), 1);
        let id = s.panoptic_gt.segments[0].id;
        assert!(s.panoptic_gt.ids.iter().all(|&i| i == id));
    }

    #[test]
    fn segments_partition_the_image() {
        for seed in 0..20 {
            let s = generate_scene(&cfg(5, 3), &mut Rng::new(seed)).unwrap();
            s.panoptic_gt.validate().unwrap();
            let total: usize = s.panoptic_gt.areas().values().sum();
            assert_eq!(total, 64 * 128);
            for seg in &s.panoptic_gt.segments {
                assert!(s.panoptic_gt.areas()[&seg.id] > 0);
            }
        }
    }

    #[test]
    fn nearer_thing_wins_contested_pixels() {
        let c = cfg(8, 2);
        let table = CategoryTable::default();
        let mut contested = 0;
        for seed in 0..10 {
            let s = generate_scene(&c, &mut Rng::new(seed)).unwrap();
            let lay = layout(&c, &table, &mut Rng::new(seed));
            for y in 0..c.height {
                for x in 0..c.width {
                    let p = y * c.width + x;
                    let covering: Vec<f64> = lay
                        .things
                        .iter()
                        .filter(|t| t.cover[p])
                        .map(|t| t.plane.at(x, y, c.width, c.height, c.max_depth))
                        .collect();
                    if covering.len() >= 2 {
                        contested += 1;
                        let min = covering.iter().copied().fold(f64::INFINITY, f64::min);
                        assert_eq!(s.depth_gt.depth[p], DepthMap::quantize(min));
                        assert!(s.panoptic_gt.ids[p] % ID_DIVISOR > 0);
                    }
                }
            }
            for &d in &s.depth_gt.depth {
                assert!((1.0..=80.0).contains(&d));
            }
        }
        assert!(contested > 0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = SceneConfig::default();
        c.height = 60;
        assert!(matches!(generate_scene(&c, &mut Rng::new(0)), Err(Error::Config(_))));
        let c = cfg(9, 1);
        assert!(generate_scene(&c, &mut Rng::new(0)).is_err());
        let mut c = cfg(1, 1);
        c.sparsity = 0.0;
        assert!(generate_scene(&c, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn sparsification_keeps_values() {
        let mut c = cfg(4, 2);
        c.sparsity = 0.3;
        let sparse = generate_scene(&c, &mut Rng::new(77)).unwrap().depth_gt;
        let dense = generate_dense_depth(&c, 77).unwrap();
        let expected = (0.3 * 64.0 * 128.0f64).round() as usize;
        assert_eq!(sparse.valid_count(), expected);
        for p in 0..sparse.depth.len() {
            if sparse.valid[p] {
                assert_eq!(sparse.depth[p], dense.depth[p]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&cfg(4, 3), &mut Rng::new(42)).unwrap();
        let b = generate_scene(&cfg(4, 3), &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
    }
}
