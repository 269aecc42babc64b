//! Run configuration, read from a TOML file. Every key is optional and
//! falls back to its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::harness::{perturbed_prior, PipelineConfig, SceneSpec};
use crate::relocalizer::LocalizeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// Queries start from their true pose.
    Truth,
    /// Queries start from a rotated and shifted pose.
    Perturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub prior: PriorKind,
    pub prior_degrees: f64,
    /// Prior shift as a fraction of the scene diameter.
    pub prior_fraction: f64,
    /// Failed queries tolerated before `eval` exits with status 4.
    pub failure_budget: usize,
    pub sweep_degrees: f64,
    pub sweep_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prior: PriorKind::Perturbed,
            prior_degrees: 30.0,
            prior_fraction: 0.25,
            failure_budget: 0,
            sweep_degrees: 30.0,
            sweep_step: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub scene: SceneSpec,
    pub pipeline: PipelineConfig,
    pub localize: LocalizeConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.pipeline.train.validate()?;
        let p = &self.pipeline;
        if p.patch_size % 2 == 0 || p.patch_size == 0 {
            return Err(Error::Config("patch_size must be odd".into()));
        }
        if p.resolution < 2 {
            return Err(Error::Config("resolution must be at least 2".into()));
        }
        let l = &self.localize;
        if l.iterations == 0 || l.samples_per_ray == 0 {
            return Err(Error::Config("localize.iterations and samples_per_ray must be positive".into()));
        }
        if !(l.ransac.threshold_px > 0.0) || !(0.0..1.0).contains(&l.ransac.confidence) {
            return Err(Error::Config("ransac threshold must be positive and confidence in [0, 1)".into()));
        }
        Ok(())
    }

    /// Seeds every stage from the scene seed unless a stage was given its own.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.pipeline.init.seed = seed;
        self.pipeline.train.seed = seed;
        self.localize.seed = seed;
        self
    }

    pub fn priors(&self, truths: &[Pose]) -> Vec<Pose> {
        match self.eval.prior {
            PriorKind::Truth => truths.to_vec(),
            PriorKind::Perturbed => truths
                .iter()
                .enumerate()
                .map(|(i, t)| perturbed_prior(&self.scene, t, i, self.eval.prior_degrees, self.eval.prior_fraction))
                .collect(),
        }
    }
}
