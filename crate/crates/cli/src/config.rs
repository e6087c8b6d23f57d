//! Experiment configuration: one JSON file drives data generation, training,
//! evaluation, and sweeps. Hashes of the canonical serialization tag every
//! output so mixed-provenance results are detectable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fdp_core::io::crc32;
use fdp_core::sampling::{Composition, SampleMethod, SamplerConfig};
use fdp_core::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use fdp_core::toyenv::{ArenaScale, Perturbation};
use fdp_core::{Error, Method, NetSize, PriorityOrder, Result, TrainingConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSpec {
    /// Arena scale: "s", "m", or "l".
    pub scale: String,
    /// Evaluation perturbations; demos are always collected unperturbed.
    #[serde(default = "default_perturbations")]
    pub perturbations: Vec<String>,
}

fn default_perturbations() -> Vec<String> {
    vec!["none".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    /// "ddim" or "ddpm".
    pub method: String,
    pub num_inference_steps: usize,
    pub eta: f64,
    pub poco_lambda: f64,
    pub cfg_lambda1: f64,
    pub cfg_lambda2: f64,
    pub cfg_normalize: bool,
    /// x0 clamp bound in normalized action units; None disables.
    pub clip: Option<f64>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            method: "ddim".into(),
            num_inference_steps: 8,
            eta: 0.0,
            poco_lambda: 0.1,
            cfg_lambda1: 1.1,
            cfg_lambda2: 0.1,
            cfg_normalize: false,
            clip: Some(1.0),
        }
    }
}

impl SamplerSpec {
    pub fn build(&self, composition: Composition, seed: u64) -> Result<SamplerConfig> {
        let method = match self.method.as_str() {
            "ddim" => SampleMethod::Ddim,
            "ddpm" => SampleMethod::Ddpm,
            other => return Err(Error::invalid(format!("unknown sampler {other:?}"))),
        };
        Ok(SamplerConfig {
            method,
            num_inference_steps: self.num_inference_steps,
            eta: self.eta,
            composition,
            poco_lambda: self.poco_lambda,
            cfg_lambda1: self.cfg_lambda1,
            cfg_lambda2: self.cfg_lambda2,
            cfg_normalize: self.cfg_normalize,
            clip: self.clip,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    /// Demonstration counts, one dataset per (count, seed).
    pub demos: Vec<usize>,
    pub methods: Vec<String>,
    #[serde(default = "default_priorities")]
    pub priorities: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub net: NetSize,
    #[serde(default = "default_diffusion_steps")]
    pub diffusion_steps: usize,
}

fn default_priorities() -> Vec<String> {
    vec!["prop_first".into()]
}

fn default_episodes() -> usize {
    300
}

fn default_diffusion_steps() -> usize {
    100
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("methods and seeds must be nonempty"));
        }
        if self.demos.is_empty() || self.demos.contains(&0) {
            return Err(Error::invalid("demos must be nonempty and positive"));
        }
        if self.priorities.is_empty() {
            return Err(Error::invalid("priorities must be nonempty"));
        }
        if self.episodes == 0 || self.diffusion_steps == 0 {
            return Err(Error::invalid("episodes and diffusion_steps must be positive"));
        }
        self.scale()?;
        for m in &self.methods {
            Method::parse(m)?;
        }
        for p in &self.priorities {
            PriorityOrder::parse(p)?;
        }
        for p in &self.env.perturbations {
            Perturbation::parse(p)?;
        }
        self.training.validate()?;
        Ok(())
    }

    pub fn scale(&self) -> Result<ArenaScale> {
        ArenaScale::parse(&self.env.scale)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(ScheduleKind::SquaredCosine, self.diffusion_steps)
    }

    /// CRC32 of the canonical serialized config.
    pub fn hash(&self) -> u32 {
        crc32(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Seed for expert demonstration episodes of one dataset.
pub fn demo_seed(seed: u64) -> u64 {
    seed.wrapping_mul(10_007).wrapping_add(1)
}

/// Seed base for evaluation rollouts, disjoint from demo seeds.
pub fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_mul(77_777).wrapping_add(31_337)
}
