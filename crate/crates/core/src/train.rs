//! Gradient-descent training loop: SGD with momentum, cosine learning-rate
//! decay, a segmentation-only phase followed by a joint phase, per-scene
//! gradients reduced in scene order, and resumable checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport, Phase, Targets};
use crate::model::{backward, forward, Model, ModelConfig};
use crate::nn::Params;
use crate::scene::{CategoryTable, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fraction of steps trained with segmentation losses only.
    pub segmentation_fraction: f64,
    /// Scenes per step, taken cyclically in dataset order.
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.1,
            momentum: 0.9,
            segmentation_fraction: 0.6,
            batch_size: 1,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.segmentation_fraction) {
            return Err(Error::config("segmentation_fraction must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learning_rate must be >= 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        let switch = (self.segmentation_fraction * self.steps as f64).round() as usize;
        if step < switch {
            Phase::Segmentation
        } else {
            Phase::Joint
        }
    }
}

/// One line of the JSON-lines loss log: batch means of every term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub scenes: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Optimizer state that, together with the parameters, fully determines the
/// rest of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"UDPSCKP1";

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 16 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.step as u64).to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.iter().chain(&self.velocity) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse("checkpoint", m.to_string());
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let step = word(8) as usize;
        let n = word(16) as usize;
        if bytes.len() != 24 + 16 * n {
            return Err(bad("length does not match the parameter count"));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            step,
            params: vals[..n].to_vec(),
            velocity: vals[n..].to_vec(),
        })
    }

    pub fn restore(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.num_params() {
            return Err(Error::parse(
                "checkpoint",
                format!("{} parameters, model has {}", self.params.len(), model.num_params()),
            ));
        }
        model.load_flat(&self.params);
        Ok(())
    }
}

/// Loss and parameter gradient of one scene. `None` when the phase leaves
/// the scene without any usable term.
pub fn scene_gradient(
    model: &Model,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    scene: &Scene,
    targets: &Targets,
    phase: Phase,
) -> Result<Option<(LossReport, Vec<f64>)>> {
    let out = forward(model, mcfg, &scene.image)?;
    let (report, grads) = match total_loss(&out, targets, lcfg, phase) {
        Ok(v) => v,
        Err(Error::NoSupervision) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut acc = model.zeros_like();
    backward(model, mcfg, &out, &grads, &mut acc);
    Ok(Some((report, acc.flatten())))
}

pub struct FitOptions<'a> {
    pub jobs: usize,
    /// Directory for `checkpoint.bin` and `loss_log.jsonl`; nothing is written
    /// when absent.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    /// Halt before this step (as if interrupted), leaving a checkpoint that
    /// resumes the same trajectory.
    pub stop_at: Option<usize>,
}

pub struct FitResult {
    pub model: Model,
    pub log: Vec<StepLog>,
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.l_cls += r.l_cls / n;
        m.l_mask += r.l_mask / n;
        m.l_depth += r.l_depth / n;
        m.l_sg += r.l_sg / n;
        m.l_dg += r.l_dg / n;
        m.total += r.total / n;
    }
    m
}

/// Drops log lines at or after `step`, left over from an interrupted run.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let entry: StepLog = serde_json::from_str(line).map_err(|e| Error::parse("loss_log.jsonl", e.to_string()))?;
        if entry.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs the optimizer. Training is a pure function of its inputs: the
/// per-scene gradients are summed in scene order whatever `jobs` is.
pub fn fit(
    mut model: Model,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
    scenes: &[Scene],
    table: &CategoryTable,
    opts: FitOptions<'_>,
) -> Result<FitResult> {
    tcfg.validate()?;
    if scenes.is_empty() && tcfg.steps > 0 {
        return Err(Error::Empty("training set has no scenes".into()));
    }
    let targets: Vec<Targets> = scenes.iter().map(|s| Targets::new(s, table)).collect::<Result<_>>()?;
    let mut velocity = vec![0.0; model.num_params()];
    let mut start = 0;
    if let Some(ck) = &opts.resume {
        ck.restore(&mut model)?;
        velocity.clone_from(&ck.velocity);
        start = ck.step;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let mut log_file = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss_log.jsonl");
            let file = if start > 0 {
                truncate_log(&path, start)?;
                fs::OpenOptions::new().append(true).open(&path)
            } else {
                fs::File::create(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let save = |step: usize, params: Vec<f64>, velocity: &[f64]| -> Result<()> {
        if let Some(dir) = opts.out_dir {
            Checkpoint {
                step,
                params,
                velocity: velocity.to_vec(),
            }
            .save(&dir.join("checkpoint.bin"))?;
        }
        Ok(())
    };

    let end = opts.stop_at.map_or(tcfg.steps, |s| s.min(tcfg.steps));
    let mut log = Vec::new();
    for step in start..end {
        let phase = tcfg.phase_at(step);
        let batch: Vec<usize> = (0..tcfg.batch_size.min(scenes.len()))
            .map(|j| (step * tcfg.batch_size + j) % scenes.len())
            .collect();
        let results: Vec<Result<Option<(LossReport, Vec<f64>)>>> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| scene_gradient(&model, mcfg, lcfg, &scenes[i], &targets[i], phase))
                .collect()
        });
        let mut reports = Vec::new();
        let mut grad = vec![0.0; velocity.len()];
        for r in results {
            if let Some((rep, g)) = r? {
                reports.push(rep);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        let mean = mean_report(&reports);
        if !mean.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            save(step, model.flatten(), &velocity)?;
            if let Some((w, path)) = log_file.as_mut() {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            return Err(Error::Divergence { step });
        }
        let lr = tcfg.learning_rate_at(step);
        if !reports.is_empty() {
            let inv = 1.0 / reports.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if tcfg.clip_norm > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > tcfg.clip_norm {
                    let s = tcfg.clip_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            let mut params = model.flatten();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = tcfg.momentum * *v + g;
                *p -= lr * *v;
            }
            model.load_flat(&params);
        }
        let entry = StepLog {
            step,
            phase,
            learning_rate: lr,
            scenes: reports.len(),
            loss: mean,
        };
        if let Some((w, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("serializable log");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log::debug!("step {step} {:?} total {:.6}", phase, entry.loss.total);
        log.push(entry);
        if tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 {
            save(step + 1, model.flatten(), &velocity)?;
        }
    }
    if let Some((w, path)) = log_file.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    save(end.max(start), model.flatten(), &velocity)?;
    Ok(FitResult { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny() -> (ModelConfig, Vec<Scene>, Model) {
        let mcfg = ModelConfig {
            channels: 8,
            pixel_dim: 6,
            depth_dim: 6,
            queries: 4,
            latents: 3,
            layers: 3,
            ffn_hidden: 12,
            ..ModelConfig::default()
        };
        let mut rng = Rng::new(5);
        let scfg = SceneConfig {
            height: 32,
            width: 64,
            things: 1,
            ..SceneConfig::default()
        };
        let scenes = (0..3).map(|_| generate_scene(&scfg, &mut rng).unwrap()).collect();
        let model = Model::new(&mcfg, 8, &mut rng).unwrap();
        (mcfg, scenes, model)
    }

    #[test]
    fn schedule_shape() {
        let t = TrainConfig {
            steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(t.learning_rate_at(0), 0.1);
        assert!(t.learning_rate_at(10).abs() < 1e-15);
        assert_eq!(t.phase_at(5), Phase::Segmentation);
        assert_eq!(t.phase_at(6), Phase::Joint);
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let (mcfg, scenes, model) = tiny();
        let t = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let r = fit(model.clone(), &mcfg, &LossConfig { patch: 3, ..LossConfig::default() }, &t, &scenes, &CategoryTable::default(), opts(1, None)).unwrap();
        assert_eq!(r.model, model);
        assert!(r.log.is_empty());
    }

    fn opts(jobs: usize, out_dir: Option<&Path>) -> FitOptions<'_> {
        FitOptions {
            jobs,
            out_dir,
            resume: None,
            stop_at: None,
        }
    }

    #[test]
    fn results_do_not_depend_on_jobs_and_resume_is_exact() {
        let (mcfg, scenes, model) = tiny();
        let lcfg = LossConfig {
            patch: 3,
            ..LossConfig::default()
        };
        let t = TrainConfig {
            steps: 6,
            batch_size: 2,
            segmentation_fraction: 0.5,
            ..TrainConfig::default()
        };
        let table = CategoryTable::default();
        let full_dir = tempfile::tempdir().unwrap();
        let a = fit(model.clone(), &mcfg, &lcfg, &t, &scenes, &table, opts(1, Some(full_dir.path()))).unwrap();
        let b = fit(model.clone(), &mcfg, &lcfg, &t, &scenes, &table, opts(3, None)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|e| e.loss.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let halted = FitOptions {
            stop_at: Some(4),
            ..opts(1, Some(dir.path()))
        };
        fit(model.clone(), &mcfg, &lcfg, &t, &scenes, &table, halted).unwrap();
        let ck = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ck.step, 4);
        let ahead = FitOptions {
            resume: Some(ck.clone()),
            stop_at: Some(5),
            ..opts(1, Some(dir.path()))
        };
        fit(model.clone(), &mcfg, &lcfg, &t, &scenes, &table, ahead).unwrap();
        let resumed = FitOptions {
            resume: Some(ck),
            ..opts(1, Some(dir.path()))
        };
        let c = fit(model.clone(), &mcfg, &lcfg, &t, &scenes, &table, resumed).unwrap();
        assert_eq!(c.model, a.model);
        let read = |d: &Path| fs::read(d.join("loss_log.jsonl")).unwrap();
        assert_eq!(read(dir.path()), read(full_dir.path()));
        assert_eq!(fs::read(dir.path().join("checkpoint.bin")).unwrap(), fs::read(full_dir.path().join("checkpoint.bin")).unwrap());
    }
}
