//! The five subcommands as library functions. Each writes `config.json` to its
//! output directory before doing any work and is a pure function of the
//! configuration, its input files and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AblationTable, ExperimentConfig, SplitConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_model, GradcheckReport};
use crate::metrics::{aggregate, evaluate_scene, MetricReport, SceneEval};
use crate::model::{predict, Model, Prediction};
use crate::numerics::Rng;
use crate::scene::{
    generate_scene, read_dataset, read_depth_png, read_panoptic_png, scene_name, write_dataset, write_depth_png,
    write_json, write_panoptic, AnnotationMode, CategoryTable, DepthMap, Manifest, PanopticMap, Scene, SceneConfig,
};
use crate::train::{fit, Checkpoint, FitOptions, FitResult};

const SCENE_STREAM: u64 = 1 << 32;
const SPLIT_STREAM: u64 = 1 << 33;
const GRADCHECK_STREAM: u64 = 1 << 34;

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

pub fn init_model(cfg: &ExperimentConfig) -> Result<Model> {
    Model::new(&cfg.model, CategoryTable::default().len(), &mut Rng::new(cfg.seed))
}

/// Scenes of a dataset in order, with annotation modes assigned by the split.
pub fn generate_dataset(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<Scene>> {
    let n = cfg.dataset.scenes;
    let mut scenes: Vec<Scene> = pool(jobs)?.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| generate_scene(&cfg.scene, &mut Rng::new(cfg.seed).fork(SCENE_STREAM + i as u64)))
            .collect::<Result<_>>()
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(cfg.seed).fork(SPLIT_STREAM).shuffle(&mut order);
    let counts = cfg.dataset.split.counts(n);
    let mut it = order.into_iter();
    for (mode, count) in SplitConfig::MODES.iter().zip(counts) {
        for i in it.by_ref().take(count) {
            scenes[i].annotation_mode = *mode;
        }
    }
    Ok(scenes)
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    cfg.save(out)?;
    let scenes = generate_dataset(cfg, jobs)?;
    log::info!("writing {} scenes to {}", scenes.len(), out.display());
    let echo = serde_json::to_value(cfg).expect("serializable config");
    write_dataset(out, &scenes, echo, cfg.seed)
}

pub fn cmd_fit(cfg: &ExperimentConfig, dataset: &Path, out: &Path, jobs: usize, resume: bool) -> Result<FitResult> {
    cfg.validate()?;
    let resume = if resume {
        let previous = ExperimentConfig::load(&out.join("config.json"))?;
        if &previous != cfg {
            return Err(Error::config("resume requires the configuration of the interrupted run"));
        }
        Some(Checkpoint::load(&out.join("checkpoint.bin"))?)
    } else {
        None
    };
    cfg.save(out)?;
    let (_, scenes) = read_dataset(dataset)?;
    log::info!("training on {} scenes for {} steps", scenes.len(), cfg.train.steps);
    let model = init_model(cfg)?;
    let opts = FitOptions {
        jobs,
        out_dir: Some(out),
        resume,
        stop_at: None,
    };
    fit(model, &cfg.model, &cfg.loss, &cfg.train, &scenes, &CategoryTable::default(), opts)
}

/// Where `eval` takes its predictions from.
#[derive(Clone, Debug)]
pub enum EvalSource {
    /// A checkpoint file, or a directory holding `checkpoint.bin`.
    Checkpoint(PathBuf),
    /// One directory per scene with `panoptic.png`, `meta.json`, `depth.png`.
    Predictions(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub aggregate: MetricReport,
    pub scenes: Vec<(String, MetricReport)>,
}

impl EvalReport {
    pub fn to_json(&self) -> serde_json::Value {
        let scenes: Vec<serde_json::Value> = self
            .scenes
            .iter()
            .map(|(name, r)| serde_json::json!({"scene": name, "metrics": r.to_percent_json()}))
            .collect();
        serde_json::json!({"aggregate": self.aggregate.to_percent_json(), "scenes": scenes})
    }
}

fn quantized(depth: &DepthMap) -> DepthMap {
    DepthMap {
        depth: depth.depth.iter().map(|&d| DepthMap::quantize(d)).collect(),
        ..depth.clone()
    }
}

/// Predictions of `model` for every scene, depth quantized as on disk.
pub fn predict_scenes(model: &Model, cfg: &ExperimentConfig, scenes: &[Scene], jobs: usize) -> Result<Vec<(PanopticMap, DepthMap)>> {
    let table = CategoryTable::default();
    pool(jobs)?.install(|| {
        scenes
            .par_iter()
            .map(|s| {
                let Prediction { panoptic, depth } = predict(model, &cfg.model, &table, &s.image)?;
                Ok((panoptic.panoptic, quantized(&depth)))
            })
            .collect()
    })
}

pub fn evaluate_predictions(names: &[String], scenes: &[Scene], preds: &[(PanopticMap, DepthMap)]) -> Result<EvalReport> {
    let table = CategoryTable::default();
    let evals: Vec<SceneEval> = scenes
        .iter()
        .zip(preds)
        .map(|(s, (p, d))| evaluate_scene(p, d, &s.panoptic_gt, &s.depth_gt))
        .collect::<Result<_>>()?;
    let per_scene = names
        .iter()
        .zip(&evals)
        .map(|(n, e)| Ok((n.clone(), aggregate(std::slice::from_ref(e), &table)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        aggregate: aggregate(&evals, &table)?,
        scenes: per_scene,
    })
}

pub fn write_predictions(dir: &Path, names: &[String], preds: &[(PanopticMap, DepthMap)]) -> Result<()> {
    for (name, (pan, depth)) in names.iter().zip(preds) {
        let d = dir.join(name);
        write_panoptic(pan, AnnotationMode::Full, &d)?;
        write_depth_png(depth, &d.join("depth.png"))?;
    }
    Ok(())
}

fn read_predictions(dir: &Path, names: &[String]) -> Result<Vec<(PanopticMap, DepthMap)>> {
    names
        .iter()
        .map(|n| {
            let d = dir.join(n);
            Ok((read_panoptic_png(&d)?, read_depth_png(&d.join("depth.png"))?))
        })
        .collect()
}

pub fn cmd_eval(cfg: &ExperimentConfig, dataset: &Path, source: &EvalSource, out: Option<&Path>, jobs: usize) -> Result<EvalReport> {
    cfg.validate()?;
    if let Some(o) = out {
        cfg.save(o)?;
    }
    let (manifest, scenes) = read_dataset(dataset)?;
    let preds = match source {
        EvalSource::Checkpoint(path) => {
            let file = if path.is_dir() { path.join("checkpoint.bin") } else { path.clone() };
            let mut model = init_model(cfg)?;
            Checkpoint::load(&file)?.restore(&mut model)?;
            let preds = predict_scenes(&model, cfg, &scenes, jobs)?;
            if let Some(o) = out {
                write_predictions(&o.join("predictions"), &manifest.scenes, &preds)?;
            }
            preds
        }
        EvalSource::Predictions(dir) => read_predictions(dir, &manifest.scenes)?,
    };
    let report = evaluate_predictions(&manifest.scenes, &scenes, &preds)?;
    if let Some(o) = out {
        write_json(&o.join("report.json"), &report.to_json())?;
    }
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<GradcheckReport> {
    cfg.validate()?;
    if let Some(o) = out {
        cfg.save(o)?;
    }
    let g = &cfg.gradcheck;
    let scfg = SceneConfig {
        height: g.height,
        width: g.width,
        sparsity: 1.0,
        ..cfg.scene.clone()
    };
    let scene = generate_scene(&scfg, &mut Rng::new(cfg.seed).fork(GRADCHECK_STREAM))?;
    let model = init_model(cfg)?;
    let lcfg = crate::losses::LossConfig {
        patch: g.patch,
        ..cfg.loss.clone()
    };
    let report = gradcheck_model(
        &model,
        &cfg.model,
        &lcfg,
        &scene,
        &CategoryTable::default(),
        &g.check,
        &mut Rng::new(cfg.seed).fork(GRADCHECK_STREAM + 1),
    )?;
    if let Some(o) = out {
        write_json(&o.join("gradcheck.json"), &report)?;
    }
    Ok(report)
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub label: String,
    pub instance_depth: bool,
    pub backup: bool,
    pub enhancement: bool,
    pub semantic_guidance: bool,
    pub depth_guidance: bool,
    /// Train with every scene fully annotated, ignoring the dataset split.
    pub full_supervision: bool,
}

impl Variant {
    #[allow(clippy::too_many_arguments)]
    fn new(name: &str, label: &str, instance_depth: bool, backup: bool, sg: bool, dg: bool, full: bool) -> Self {
        Self {
            name: name.into(),
            label: label.into(),
            instance_depth,
            backup,
            enhancement: instance_depth,
            semantic_guidance: sg,
            depth_guidance: dg,
            full_supervision: full,
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.model.enable_instance_depth = self.instance_depth;
        c.model.enable_backup = self.backup || !self.instance_depth;
        c.model.enable_enhancement = self.enhancement;
        c.loss.enable_sg = self.semantic_guidance;
        c.loss.enable_dg = self.depth_guidance;
        c
    }
}

/// Rows in table order.
pub fn variants(table: AblationTable) -> Vec<Variant> {
    match table {
        AblationTable::Components => vec![
            Variant::new("A", "A", false, false, false, false, true),
            Variant::new("B", "B", true, false, false, false, true),
            Variant::new("C", "C", true, true, false, false, true),
            Variant::new("D", "D", true, true, true, false, true),
            Variant::new("E", "E", true, true, true, true, true),
        ],
        AblationTable::SemiSupervision => vec![
            Variant::new("full", "Full-supervision", true, true, false, false, true),
            Variant::new("semi", "Semi-supervision", true, true, false, false, false),
            Variant::new("semi_dg", "+ depth guidance", true, true, false, true, false),
            Variant::new("semi_sg", "+ semantic guidance", true, true, true, false, false),
            Variant::new("semi_both", "+ both guidance", true, true, true, true, false),
        ],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub table: AblationTable,
    pub rows: Vec<AblationRow>,
}

fn row_json(row: &AblationRow) -> serde_json::Value {
    let pct = |v: f64| (v * 1000.0).round() / 10.0;
    let m = &row.metrics;
    let mut obj = serde_json::to_value(&row.variant).expect("serializable variant");
    let map = obj.as_object_mut().expect("object");
    for (l, q) in m.dpq.iter().rev() {
        map.insert(format!("dpq_{l}"), pct(q.all).into());
    }
    map.insert("dpq".into(), pct(m.dpq_mean).into());
    map.insert("pq".into(), pct(m.pq.all).into());
    map.insert(
        "abs_rel".into(),
        m.depth.as_ref().map(|d| (d.abs_rel * 1e4).round() / 1e4).into(),
    );
    obj
}

pub fn ablation_json(results: &[AblationResult]) -> serde_json::Value {
    let tables: Vec<serde_json::Value> = results
        .iter()
        .map(|t| serde_json::json!({"table": t.table, "rows": t.rows.iter().map(row_json).collect::<Vec<_>>()}))
        .collect();
    serde_json::json!({ "tables": tables })
}

/// Trains and evaluates one variant. Evaluation uses the complete ground
/// truth of `scenes` whatever their annotation modes.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: &Variant,
    names: &[String],
    scenes: &[Scene],
    out: Option<&Path>,
    jobs: usize,
) -> Result<AblationRow> {
    let vcfg = variant.apply(cfg);
    vcfg.validate()?;
    let mut train = scenes.to_vec();
    if variant.full_supervision {
        train.iter_mut().for_each(|s| s.annotation_mode = AnnotationMode::Full);
    }
    if let Some(o) = out {
        vcfg.save(o)?;
    }
    log::info!("variant {} ({})", variant.name, variant.label);
    let opts = FitOptions {
        jobs,
        out_dir: out,
        resume: None,
        stop_at: None,
    };
    let fitted = fit(init_model(&vcfg)?, &vcfg.model, &vcfg.loss, &vcfg.train, &train, &CategoryTable::default(), opts)?;
    let preds = predict_scenes(&fitted.model, &vcfg, scenes, jobs)?;
    let report = evaluate_predictions(names, scenes, &preds)?;
    Ok(AblationRow {
        variant: variant.clone(),
        metrics: report.aggregate,
    })
}

pub fn cmd_ablate(cfg: &ExperimentConfig, dataset: &Path, out: &Path, jobs: usize) -> Result<Vec<AblationResult>> {
    cfg.validate()?;
    cfg.save(out)?;
    let (manifest, scenes) = read_dataset(dataset)?;
    let wanted = |v: &Variant| cfg.ablate.variants.is_empty() || cfg.ablate.variants.iter().any(|n| n == &v.name);
    let mut results = Vec::new();
    for &table in &cfg.ablate.tables {
        let table_name = serde_json::to_value(table).expect("serializable").as_str().expect("unit variant").to_string();
        let mut rows = Vec::new();
        for v in variants(table).into_iter().filter(wanted) {
            let dir = out.join(&table_name).join(&v.name);
            rows.push(run_variant(cfg, &v, &manifest.scenes, &scenes, Some(&dir), jobs)?);
        }
        results.push(AblationResult { table, rows });
    }
    write_json(&out.join("ablation.json"), &ablation_json(&results))?;
    Ok(results)
}

/// Names `scene_00000`, `scene_00001`, ... as written by `gen`.
pub fn default_names(n: usize) -> Vec<String> {
    (0..n).map(scene_name).collect()
}

/// Removes a stale output file so a failed run cannot leave a mix of old and
/// new artifacts.
pub fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}
