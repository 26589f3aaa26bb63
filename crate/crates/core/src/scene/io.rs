//! On-disk scene layout.
//!
//! ```text
//! <scene>/image.ppm      P6, 8-bit RGB
//! <scene>/panoptic.png   16-bit gray, category * 1000 + instance, 0 = void
//! <scene>/depth.png      16-bit gray, meters * 256, 0 = invalid
//! <scene>/meta.json      {"segments": [...], "annotation_mode": "..."}
//! <dataset>/manifest.json {"scenes": [...], "config": {...}, "seed": N}
//! ```

use std::fs;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{AnnotationMode, DepthMap, PanopticMap, Scene, SegmentInfo, DEPTH_SCALE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub segments: Vec<SegmentInfo>,
    pub annotation_mode: AnnotationMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenes: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, field: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(field, e.to_string()))
}

fn write_gray16(path: &Path, width: usize, height: usize, data: Vec<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data).expect("buffer size");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(image_err(path))
}

fn read_gray16(path: &Path, field: &str) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(image_err(path))?;
    let luma = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(Error::parse(
                field,
                format!("expected 16-bit grayscale, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = luma.dimensions();
    Ok((h as usize, w as usize, luma.into_raw()))
}

pub fn write_panoptic(map: &PanopticMap, mode: AnnotationMode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = map
        .ids
        .iter()
        .map(|&id| {
            u16::try_from(id).map_err(|_| Error::config(format!("panoptic id {id} exceeds 16 bits")))
        })
        .collect::<Result<Vec<_>>>()?;
    write_gray16(&dir.join("panoptic.png"), map.width, map.height, data)?;
    write_json(
        &dir.join("meta.json"),
        &SceneMeta {
            segments: map.segments.clone(),
            annotation_mode: mode,
        },
    )
}

pub fn write_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let data = depth
        .depth
        .iter()
        .zip(&depth.valid)
        .map(|(&d, &v)| {
            if v {
                (d * DEPTH_SCALE).round().clamp(1.0, f64::from(u16::MAX)) as u16
            } else {
                0
            }
        })
        .collect();
    write_gray16(path, depth.width, depth.height, data)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let (h, w, raw) = read_gray16(path, "depth.png")?;
    Ok(DepthMap {
        height: h,
        width: w,
        depth: raw.iter().map(|&v| f64::from(v) / DEPTH_SCALE).collect(),
        valid: raw.iter().map(|&v| v != 0).collect(),
    })
}

pub fn read_meta(dir: &Path) -> Result<SceneMeta> {
    read_json(&dir.join("meta.json"), "meta.json")
}

pub fn read_panoptic_png(dir: &Path) -> Result<PanopticMap> {
    let (h, w, raw) = read_gray16(&dir.join("panoptic.png"), "panoptic.png")?;
    let meta = read_meta(dir)?;
    let map = PanopticMap {
        height: h,
        width: w,
        ids: raw.into_iter().map(u32::from).collect(),
        segments: meta.segments,
    };
    map.validate()?;
    Ok(map)
}

pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (scene.height(), scene.width());
    let n = h * w;
    let img = scene.image.data();
    let mut rgb = Vec::with_capacity(3 * n);
    for p in 0..n {
        for ch in 0..3 {
            rgb.push((img[ch * n + p] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, rgb).expect("buffer size");
    let path = dir.join("image.ppm");
    buf.save_with_format(&path, ImageFormat::Pnm)
        .map_err(image_err(&path))?;
    write_panoptic(&scene.panoptic_gt, scene.annotation_mode, dir)?;
    write_depth_png(&scene.depth_gt, &dir.join("depth.png"))
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("image.ppm");
    let rgb = image::open(&path).map_err(image_err(&path))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let n = h * w;
    let mut image = Tensor::zeros(&[3, h, w]);
    for (p, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            image.data_mut()[ch * n + p] = f64::from(px[ch]) / 255.0;
        }
    }
    let panoptic_gt = read_panoptic_png(dir)?;
    let depth_gt = read_depth_png(&dir.join("depth.png"))?;
    if (panoptic_gt.height, panoptic_gt.width) != (h, w) || (depth_gt.height, depth_gt.width) != (h, w) {
        return Err(Error::parse(
            "panoptic.png",
            format!("label maps do not match the {h}x{w} image"),
        ));
    }
    Ok(Scene {
        image,
        panoptic_gt,
        depth_gt,
        annotation_mode: read_meta(dir)?.annotation_mode,
    })
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

pub fn write_dataset(
    dir: &Path,
    scenes: &[Scene],
    config: serde_json::Value,
    seed: u64,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..scenes.len()).map(scene_name).collect();
    for (scene, name) in scenes.iter().zip(&names) {
        write_scene(scene, &dir.join(name))?;
    }
    let manifest = Manifest {
        scenes: names,
        config,
        seed,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"), "manifest.json")?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|name| read_scene(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}
