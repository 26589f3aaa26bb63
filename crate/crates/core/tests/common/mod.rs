#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use unidps::config::ExperimentConfig;
use unidps::scene::SceneConfig;

/// Relative path → SHA-256 of every file below `dir`.
pub fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex(&Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Small, fast experiment used by the CLI and determinism tests.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 11;
    c.scene = SceneConfig {
        height: 32,
        width: 64,
        things: 2,
        ..SceneConfig::default()
    };
    c.dataset.scenes = 4;
    c.model.channels = 8;
    c.model.pixel_dim = 6;
    c.model.depth_dim = 6;
    c.model.queries = 5;
    c.model.latents = 3;
    c.model.layers = 3;
    c.model.ffn_hidden = 12;
    c.loss.patch = 3;
    c.train.steps = 6;
    c.train.batch_size = 2;
    c.gradcheck.check.samples = 40;
    c
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}
