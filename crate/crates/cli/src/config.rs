//! Experiment configuration: TOML with one dotted key per line, e.g.
//!
//! ```toml
//! data.seed = 0
//! train.seed = 0
//! train.epochs = 200
//! extract.lambdas = [0.0, 0.5, 1.0]
//! projection.classes = [0, 1, 2]
//! ```
//!
//! Unknown keys are rejected and both seeds must be given explicitly.

use anyhow::{bail, Context, Result};
use mixup_geometry::trainer::{SyntheticDataset, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Class means sit on a circle of this radius.
    pub radius: f64,
    pub noise_scale: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_classes: 3, input_dim: 2, radius: 2.0, noise_scale: 0.5, samples_per_class: 500, seed: 0 }
    }
}

impl DataConfig {
    pub fn spec(&self) -> Result<SyntheticDataset> {
        Ok(SyntheticDataset::on_circle(
            self.num_classes,
            self.input_dim,
            self.radius,
            self.noise_scale,
            self.samples_per_class,
            self.seed,
        )?)
    }
}

/// Which mixed samples to push through the trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Random source pairs per kind.
    pub pairs: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { pairs: 100, lambdas: (0..=10).map(|k| k as f64 / 10.0).collect(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub classes: [usize; 3],
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { classes: [0, 1, 2] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub projection: ProjectionConfig,
}

const REQUIRED_SEEDS: [(&str, &str); 2] = [("data", "seed"), ("train", "seed")];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).context("malformed config")?;
        for (section, key) in REQUIRED_SEEDS {
            let present = table.get(section).and_then(|s| s.as_table()).is_some_and(|s| s.contains_key(key));
            if !present {
                bail!("config must set {section}.{key} explicitly");
            }
        }
        let cfg: Self = table.try_into().context("invalid config")?;
        cfg.train.validate()?;
        if cfg.extract.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            bail!("extract.lambdas must lie in [0, 1]");
        }
        if let Some(&bad) = cfg.projection.classes.iter().find(|&&c| c >= cfg.data.num_classes) {
            bail!("projection class {bad} is out of range for {} classes", cfg.data.num_classes);
        }
        Ok(cfg)
    }
}
