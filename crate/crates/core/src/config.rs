//! Experiment configuration: every knob of every command, serialized next to
//! each output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::GradcheckConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::scene::{read_json, write_json, AnnotationMode, SceneConfig};
use crate::train::TrainConfig;

/// Shares of the three annotation modes in a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub full: f64,
    pub panoptic_only: f64,
    pub depth_only: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            full: 1.0 / 3.0,
            panoptic_only: 1.0 / 3.0,
            depth_only: 1.0 / 3.0,
        }
    }
}

impl SplitConfig {
    pub fn fully_supervised() -> Self {
        Self {
            full: 1.0,
            panoptic_only: 0.0,
            depth_only: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.full, self.panoptic_only, self.depth_only];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("split shares must be non-negative with a positive sum"));
        }
        Ok(())
    }

    /// Scene counts per mode (full, panoptic-only, depth-only) by largest
    /// remainder; ties go to the earlier mode.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let parts = [self.full, self.panoptic_only, self.depth_only];
        let total: f64 = parts.iter().sum();
        let exact: Vec<f64> = parts.iter().map(|p| p / total * n as f64).collect();
        let mut counts = [0usize; 3];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).expect("finite shares").then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }

    pub const MODES: [AnnotationMode; 3] = [AnnotationMode::Full, AnnotationMode::PanopticOnly, AnnotationMode::DepthOnly];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub split: SplitConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 30,
            split: SplitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSettings {
    pub height: usize,
    pub width: usize,
    /// Guidance window used during the check. A 32×64 scene has 4×8 tokens
    /// at its finest level, too small for 5×5 windows.
    pub patch: usize,
    #[serde(flatten)]
    pub check: GradcheckConfig,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            height: 32,
            width: 64,
            patch: 3,
            check: GradcheckConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTable {
    /// Instance-wise depth, backup query and each guidance direction added
    /// one at a time, all scenes fully annotated.
    Components,
    /// Full supervision against the dataset's annotation split, with and
    /// without each guidance direction.
    SemiSupervision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub tables: Vec<AblationTable>,
    /// Variant names to run; empty runs every row.
    pub variants: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            tables: vec![AblationTable::Components, AblationTable::SemiSupervision],
            variants: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckSettings,
    pub ablate: AblateConfig,
}

impl ExperimentConfig {
    /// Reads a JSON file; absent fields keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path, "config")?;
        Ok(cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), self)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.dataset.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.loss.patch < 3 || self.loss.patch % 2 == 0 {
            return Err(Error::config(format!("patch must be odd and at least 3, got {}", self.loss.patch)));
        }
        if self.gradcheck.patch < 3 || self.gradcheck.patch % 2 == 0 {
            return Err(Error::config("gradcheck.patch must be odd and at least 3"));
        }
        SceneConfig {
            height: self.gradcheck.height,
            width: self.gradcheck.width,
            ..self.scene.clone()
        }
        .validate()
    }
}
