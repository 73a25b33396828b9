use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TeacherConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::search::SearchConfig;
use crate::task::{ProbeConfig, TaskSpec};
use crate::vit::ViTConfig;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub probe: ProbeConfig,
}

/// Everything one pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub vit: ViTConfig,
    pub task: TaskSpec,
    pub teacher: TeacherConfig,
    pub distill1: DistillConfig,
    pub distill2: DistillConfig,
    pub eval: EvalConfig,
    pub search1: SearchConfig,
    pub search2: SearchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fast = AdamConfig { lr: 1e-3, ..Default::default() };
        let distill = DistillConfig { steps: 300, batch: 8, adam: AdamConfig { lr: 3e-4, ..Default::default() }, taps: vec![], seed: 0 };
        Self {
            schema_version: CONFIG_SCHEMA,
            seed: 7,
            vit: ViTConfig::default(),
            task: TaskSpec::default(),
            teacher: TeacherConfig { steps: 600, batch: 8, adam: fast, seed: 0 },
            distill1: distill.clone(),
            distill2: distill,
            eval: EvalConfig {
                train_images: 128,
                val_images: 128,
                probe: ProbeConfig { classes: 5, steps: 2000, batch: 512, adam: AdamConfig { lr: 3e-2, ..Default::default() }, seed: 0, standardize: true },
            },
            search1: SearchConfig::default(),
            // the comparison row needs a two-Full hybrid, so stage 2 runs to
            // its budget of two
            search2: SearchConfig { tau: 0.0, delta: 0.0, k_max: 2, ..Default::default() },
        }
        .with_seed(7)
    }
}

impl ExperimentConfig {
    /// Derives every component seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.teacher.seed = seed;
        self.distill1.seed = seed.wrapping_add(1);
        self.distill2.seed = seed.wrapping_add(2);
        self.eval.probe.seed = seed.wrapping_add(3);
        self.search1.seed = seed;
        self.search2.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema {} unsupported (expected {CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        self.vit.validate()?;
        self.task.validate()?;
        if self.task.image_size != self.vit.image_size || self.task.patch != self.vit.patch || self.vit.channels != 3 {
            return Err(Error::Config("task image size, patch and channels must match the model".into()));
        }
        if self.eval.probe.classes != self.task.classes {
            return Err(Error::Config("probe classes must equal task classes".into()));
        }
        if self.eval.train_images == 0 || self.eval.val_images == 0 {
            return Err(Error::Config("evaluation sets must be non-empty".into()));
        }
        for d in [&self.distill1, &self.distill2] {
            d.resolved_taps(self.vit.depth)?;
        }
        self.search1.validate()?;
        self.search2.validate()
    }

    /// Reads a strict JSON config; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
