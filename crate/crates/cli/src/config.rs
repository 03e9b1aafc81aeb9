use std::fs;
use std::path::{Path, PathBuf};

use agseg_core::data::AugmentationSpec;
use agseg_core::train::{EarlyStopPolicy, ExperimentConfig, HyperConfig};
use agseg_core::{LossConfig, NetworkConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "AGSEG_SEED";

/// A run description file. Relative paths resolve against the file's own
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_augmentation")]
    pub augmentation: Option<AugmentationSpec>,
    #[serde(default)]
    pub early_stop: EarlyStopPolicy,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default = "default_true")]
    pub subject_wise: bool,
}

fn default_augmentation() -> Option<AugmentationSpec> {
    ExperimentConfig::default().augmentation
}

fn default_threshold() -> f32 {
    ExperimentConfig::default().threshold
}

fn default_true() -> bool {
    true
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads, resolves paths, applies the seed override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v.parse().with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))?;
            cfg.set_seed(seed);
        }
        let errs = cfg.experiment().validate();
        if !errs.is_empty() {
            bail!("invalid config {}:\n  {}", path.display(), errs.join("\n  "));
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.network.seed = seed;
        self.hyper.seed = seed;
        if let Some(a) = &mut self.augmentation {
            a.seed = seed;
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            network: self.network.clone(),
            hyper: self.hyper.clone(),
            loss: self.loss,
            augmentation: self.augmentation.clone(),
            early_stop: self.early_stop,
            threshold: self.threshold,
            subject_wise: self.subject_wise,
        }
    }

    /// The config with every default filled in.
    pub fn materialized_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
