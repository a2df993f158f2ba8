//! TOML run configuration.
//!
//! Only `seed` and `target` are required; every other block falls back to
//! the two-mode benchmark defaults. The top-level seed replaces the `seed`
//! fields inside the `teacher` and `distill` blocks so one number governs
//! every stage.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use dmd_core::diffusion::DenoiserSpec;
use dmd_core::eval::{Bandwidth, EvalConfig};
use dmd_core::sampler::Solver;
use dmd_core::schedule::ScheduleSpec;
use dmd_core::toyworld::{two_mode_benchmark, GaussianMixture};
use dmd_core::{DmdConfig, TeacherConfig};
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub target: GaussianMixture,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub pairs: PairsConfig,
    #[serde(default = "DmdConfig::two_mode")]
    pub distill: DmdConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// How the regression dataset is built from the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsConfig {
    pub count: usize,
    pub solver: Solver,
    pub steps: usize,
    /// Guidance scale used when the teacher is conditional.
    pub omega: f64,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            solver: Solver::Heun,
            steps: 18,
            omega: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 4096 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Teacher samples drawn as the reference set.
    pub n_reference: usize,
    /// Same-distribution resamples behind the MMD noise floor.
    pub floor_resamples: usize,
    pub bandwidth: Bandwidth,
    pub projections: usize,
    pub radius_in_stds: f64,
    pub min_share: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let m = EvalConfig::default();
        Self {
            n_reference: 4096,
            floor_resamples: 20,
            bandwidth: m.bandwidth,
            projections: m.projections,
            radius_in_stds: m.radius_in_stds,
            min_share: m.min_share,
        }
    }
}

impl EvalSection {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            bandwidth: self.bandwidth,
            projections: self.projections,
            radius_in_stds: self.radius_in_stds,
            min_share: self.min_share,
        }
    }
}

impl RunConfig {
    /// The two-mode benchmark with its full-objective distillation settings.
    pub fn two_mode() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            target: two_mode_benchmark().mixture,
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserSpec::default(),
            teacher: TeacherConfig::default(),
            pairs: PairsConfig::default(),
            distill: DmdConfig::two_mode(),
            sample: SampleConfig::default(),
            eval: EvalSection::default(),
        }
    }

    /// Class-conditional variant of the benchmark distilled with guidance `omega`.
    pub fn two_class(omega: f64) -> Self {
        let mut cfg = Self::two_mode();
        cfg.denoiser.classes = Some(cfg.target.len());
        cfg.pairs.omega = omega;
        cfg.distill.omega = omega;
        cfg
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable in TOML")
    }

    /// FNV-1a of the canonical TOML serialization.
    pub fn hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.to_toml().as_bytes());
        h.finish()
    }

    /// FNV-1a of the target mixture alone, which fixes what a teacher learns.
    pub fn target_hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&serde_json::to_vec(&self.target).expect("mixtures serialize"));
        h.finish()
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg_err = |field: &str, msg: &str| Err(CliError::Config(format!("{field}: {msg}")));
        if self.denoiser.dim != self.target.dim() {
            return cfg_err(
                "denoiser.dim",
                &format!(
                    "is {} but the target mixture is {}-dimensional",
                    self.denoiser.dim,
                    self.target.dim()
                ),
            );
        }
        if let Some(k) = self.denoiser.classes {
            if k != self.target.len() {
                return cfg_err(
                    "denoiser.classes",
                    "must equal the number of target components",
                );
            }
        }
        if self.pairs.count == 0 || self.pairs.steps == 0 {
            return cfg_err("pairs", "count and steps must be positive");
        }
        if self.sample.n == 0 {
            return cfg_err("sample.n", "must be positive");
        }
        if self.eval.n_reference == 0 || self.eval.floor_resamples == 0 {
            return cfg_err("eval", "n_reference and floor_resamples must be positive");
        }
        if self.teacher.steps == 0 || self.teacher.batch == 0 {
            return cfg_err("teacher", "steps and batch must be positive");
        }
        self.denoiser.validate()?;
        self.schedule.build()?;
        self.distill.validate()?;
        self.teacher.optimizer.validate()?;
        Ok(())
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            seed: self.seed,
            ..self.teacher.clone()
        }
    }

    pub fn distill_config(&self) -> DmdConfig {
        DmdConfig {
            seed: self.seed,
            ..self.distill.clone()
        }
    }
}
