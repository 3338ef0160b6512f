use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use uplvp::encoders::{load_dataset, synth_dataset, Dataset, FixtureConfig};
use uplvp::eval::ApMode;
use uplvp::prompts::InjectionStrategy;
use uplvp::train::TrainConfig;

/// Where detections come from in `eval-ap`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionSource {
    /// Pseudo-mask proposals scored by their mean channel score.
    #[default]
    Proposals,
    /// Final-stage masks of the checkpoint (or a freshly seeded head).
    Model,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Synthetic fixture; used when `scene_manifests` is empty.
    pub fixture: FixtureConfig,
    /// Scene manifest paths, relative to the config file.
    pub scene_manifests: Vec<PathBuf>,
    /// Used when `--out` is not given.
    pub output_dir: Option<PathBuf>,
    /// Checkpoint blob for `match`, `eval-ap` and `atlas`, relative to the
    /// config file.
    pub checkpoint: Option<PathBuf>,
    /// Strategies for `compare` when `--strategies` is not given.
    pub strategies: Vec<InjectionStrategy>,
    pub detections: DetectionSource,
    pub ap_mode: ApMode,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are resolved against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            bail!("config not found: {}", path.display());
        }
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.scene_manifests.iter_mut().for_each(resolve);
        if let Some(c) = cfg.checkpoint.as_mut() {
            resolve(c);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        if self.scene_manifests.is_empty() {
            Ok(synth_dataset(&self.fixture)?)
        } else {
            Ok(load_dataset(&self.scene_manifests)?)
        }
    }
}
