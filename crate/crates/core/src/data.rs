//! Demonstration datasets: expert collection, normalization statistics,
//! chunked training-pair extraction, and `.fdpd` serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{crc32, read_container, write_container, ByteReader, ByteWriter};
use crate::obs::{ModalityKind, ModalitySpec, ObservationBundle};
use crate::toyenv::{
    run_expert_episode, ControlConfig, EnvConfig, EpisodeRecord, PerturbationKind, RenderedObs,
    ACTION_DIM, PROPRIO_DIM, VISION_DIM,
};
use crate::training::TrainItem;

pub const DATASET_MAGIC: [u8; 4] = *b"FDPD";
pub const DATASET_VERSION: u32 = 1;

/// Which modality leads the bundle (and is therefore prioritized with k=1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityOrder {
    ProprioFirst,
    VisionFirst,
}

impl PriorityOrder {
    pub const ALL: [PriorityOrder; 2] = [PriorityOrder::ProprioFirst, PriorityOrder::VisionFirst];

    pub fn name(self) -> &'static str {
        match self {
            PriorityOrder::ProprioFirst => "prop_first",
            PriorityOrder::VisionFirst => "vision_first",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prop_first" => Ok(PriorityOrder::ProprioFirst),
            "vision_first" => Ok(PriorityOrder::VisionFirst),
            other => Err(Error::invalid(format!("unknown priority order {other:?}"))),
        }
    }
}

/// Per-dimension min/max mapping actions into [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ActionNorm {
    fn span(&self, i: usize) -> f64 {
        let s = self.max[i] - self.min[i];
        if s.abs() < 1e-12 {
            1.0 // degenerate dim: keep the map invertible
        } else {
            s
        }
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(j, v)| {
                let i = j % self.min.len();
                2.0 * (v - self.min[i]) / self.span(i) - 1.0
            })
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| {
                let i = j % self.min.len();
                (v + 1.0) * 0.5 * self.span(i) + self.min[i]
            })
            .collect()
    }

    /// (scale, offset) for a flattened chunk of `horizon` actions, matching
    /// the sampler's affine denormalization hook.
    pub fn scale_offset(&self, horizon: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.min.len();
        let mut scale = Vec::with_capacity(horizon * d);
        let mut offset = Vec::with_capacity(horizon * d);
        for _ in 0..horizon {
            for i in 0..d {
                scale.push(0.5 * self.span(i));
                offset.push(0.5 * self.span(i) + self.min[i]);
            }
        }
        (scale, offset)
    }
}

/// Per-dimension mean/std for one observation modality (per-frame dims).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsNorm {
    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(j, x)| {
                let i = j % self.mean.len();
                (x - self.mean[i]) / self.std[i]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub env_config_hash: u32,
    pub expert_seed: u64,
    pub count: usize,
    pub content_hash: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub episodes: Vec<EpisodeRecord>,
    pub env_config: EnvConfig,
    pub control: ControlConfig,
    pub action_norm: ActionNorm,
    pub proprio_norm: ObsNorm,
    pub vision_norm: ObsNorm,
    pub provenance: Provenance,
}

pub fn env_config_hash(config: &EnvConfig) -> u32 {
    crc32(serde_json::to_string(config).expect("config serializes").as_bytes())
}

fn compute_stats(episodes: &[EpisodeRecord]) -> (ActionNorm, ObsNorm, ObsNorm) {
    let mut amin = vec![f64::INFINITY; ACTION_DIM];
    let mut amax = vec![f64::NEG_INFINITY; ACTION_DIM];
    let mut psum = vec![0.0; PROPRIO_DIM];
    let mut psq = vec![0.0; PROPRIO_DIM];
    let mut vsum = vec![0.0; VISION_DIM];
    let mut vsq = vec![0.0; VISION_DIM];
    let mut n = 0usize;
    for ep in episodes {
        for a in &ep.actions {
            for i in 0..ACTION_DIM {
                amin[i] = amin[i].min(a[i]);
                amax[i] = amax[i].max(a[i]);
            }
        }
        for o in &ep.observations {
            for i in 0..PROPRIO_DIM {
                psum[i] += o.proprio[i];
                psq[i] += o.proprio[i] * o.proprio[i];
            }
            for i in 0..VISION_DIM {
                vsum[i] += o.vision[i];
                vsq[i] += o.vision[i] * o.vision[i];
            }
            n += 1;
        }
    }
    let finalize = |sum: Vec<f64>, sq: Vec<f64>| {
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let v = (q / n as f64 - m * m).max(0.0).sqrt();
                if v < 1e-8 {
                    1.0 // constant dims pass through unscaled
                } else {
                    v
                }
            })
            .collect();
        ObsNorm { mean, std }
    };
    (
        ActionNorm { min: amin, max: amax },
        finalize(psum, psq),
        finalize(vsum, vsq),
    )
}

/// Collect `count` successful expert episodes (per-episode seeds start at
/// `seed`, failed seeds are skipped) and compute normalization statistics.
pub fn generate_demos(
    env_config: &EnvConfig,
    control: &ControlConfig,
    count: usize,
    seed: u64,
) -> Result<DemoDataset> {
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let mut episodes = Vec::with_capacity(count);
    let mut failures = 0usize;
    let mut next_seed = seed;
    while episodes.len() < count {
        let rec = run_expert_episode(env_config, next_seed)?;
        next_seed += 1;
        if rec.success {
            episodes.push(rec);
        } else {
            failures += 1;
            if failures * 10 > count + failures {
                return Err(Error::Contract(format!(
                    "expert failed {failures} times collecting {count} episodes; environment misconfigured"
                )));
            }
        }
    }
    let (action_norm, proprio_norm, vision_norm) = compute_stats(&episodes);
    let mut ds = DemoDataset {
        episodes,
        env_config: env_config.clone(),
        control: *control,
        action_norm,
        proprio_norm,
        vision_norm,
        provenance: Provenance {
            env_config_hash: env_config_hash(env_config),
            expert_seed: seed,
            count,
            content_hash: 0,
        },
    };
    ds.provenance.content_hash = ds.content_hash();
    Ok(ds)
}

fn history_at(obs: &[RenderedObs], i: usize, o: usize) -> Vec<&RenderedObs> {
    // repeat-first padding
    (0..o)
        .map(|j| {
            let idx = (i + j).saturating_sub(o - 1);
            &obs[idx.min(obs.len() - 1)]
        })
        .collect()
}

fn chunk_at(actions: &[Vec<f64>], i: usize, h: usize) -> Vec<f64> {
    // repeat-last padding
    let mut out = Vec::with_capacity(h * ACTION_DIM);
    for j in 0..h {
        let idx = (i + j).min(actions.len() - 1);
        out.extend_from_slice(&actions[idx]);
    }
    out
}

impl DemoDataset {
    pub fn modality_specs(&self, order: PriorityOrder) -> Vec<ModalitySpec> {
        let proprio = ModalitySpec {
            name: "proprio".into(),
            dim: PROPRIO_DIM,
            kind: ModalityKind::Proprio,
        };
        let vision = ModalitySpec {
            name: "vision".into(),
            dim: VISION_DIM,
            kind: ModalityKind::VisionGrid,
        };
        match order {
            PriorityOrder::ProprioFirst => vec![proprio, vision],
            PriorityOrder::VisionFirst => vec![vision, proprio],
        }
    }

    /// Per-modality conditioning dims over the observation horizon, in
    /// bundle order.
    pub fn cond_dims(&self, order: PriorityOrder) -> Vec<usize> {
        let o = self.control.obs_history;
        match order {
            PriorityOrder::ProprioFirst => vec![o * PROPRIO_DIM, o * VISION_DIM],
            PriorityOrder::VisionFirst => vec![o * VISION_DIM, o * PROPRIO_DIM],
        }
    }

    pub fn action_chunk_dim(&self) -> usize {
        self.control.action_horizon * ACTION_DIM
    }

    fn cond_from_history(&self, history: &[&RenderedObs], order: PriorityOrder) -> Vec<Vec<f64>> {
        let mut proprio = Vec::new();
        let mut vision = Vec::new();
        for ob in history {
            proprio.extend(self.proprio_norm.normalize(&ob.proprio));
            vision.extend(self.vision_norm.normalize(&ob.vision));
        }
        match order {
            PriorityOrder::ProprioFirst => vec![proprio, vision],
            PriorityOrder::VisionFirst => vec![vision, proprio],
        }
    }

    /// Every step of every episode becomes one normalized (history, chunk)
    /// pair, episode-major so a trailing validation split holds out whole
    /// episodes.
    pub fn train_items(&self, order: PriorityOrder) -> Vec<TrainItem> {
        let o = self.control.obs_history;
        let h = self.control.action_horizon;
        let mut items = Vec::new();
        for ep in &self.episodes {
            for i in 0..ep.actions.len() {
                let history = history_at(&ep.observations, i, o);
                items.push(TrainItem {
                    x0: self.action_norm.normalize(&chunk_at(&ep.actions, i, h)),
                    cond: self.cond_from_history(&history, order),
                });
            }
        }
        items
    }

    /// Observation bundle (priority k = 1) for closed-loop control.
    pub fn bundle_from_history(
        &self,
        history: &[RenderedObs],
        order: PriorityOrder,
    ) -> Result<ObservationBundle> {
        let refs: Vec<&RenderedObs> = history.iter().collect();
        if refs.len() != self.control.obs_history {
            return Err(Error::invalid("history length must match obs_history"));
        }
        ObservationBundle::new(
            self.modality_specs(order),
            self.cond_from_history(&refs, order),
            1,
            self.control.obs_history,
        )
    }

    /// Affine map from normalized sampler output back to action units.
    pub fn action_scale_offset(&self) -> (Vec<f64>, Vec<f64>) {
        self.action_norm.scale_offset(self.control.action_horizon)
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.put_str(&serde_json::to_string(&self.env_config).expect("config serializes"));
        w.put_str(&serde_json::to_string(&self.control).expect("config serializes"));
        w.put_u32(self.provenance.env_config_hash);
        w.put_u64(self.provenance.expert_seed);
        w.put_u64(self.provenance.count as u64);
        w.put_f64_slice(&self.action_norm.min);
        w.put_f64_slice(&self.action_norm.max);
        w.put_f64_slice(&self.proprio_norm.mean);
        w.put_f64_slice(&self.proprio_norm.std);
        w.put_f64_slice(&self.vision_norm.mean);
        w.put_f64_slice(&self.vision_norm.std);
        w.put_u32(self.episodes.len() as u32);
        for ep in &self.episodes {
            w.put_u32(ep.observations.len() as u32);
            for o in &ep.observations {
                w.put_f64_slice(&o.proprio);
                w.put_f64_slice(&o.vision);
            }
            for a in &ep.actions {
                w.put_f64_slice(a);
            }
            w.put_u32(ep.success as u32);
            w.put_u32(perturbation_tag(ep.perturbation));
            w.put_u64(ep.seed);
        }
        w.into_bytes()
    }

    /// CRC32 of the serialized payload; stable across platforms (fixed
    /// little-endian f64 encoding).
    pub fn content_hash(&self) -> u32 {
        crc32(&self.payload())
    }
}

fn perturbation_tag(kind: PerturbationKind) -> u32 {
    match kind {
        PerturbationKind::None => 0,
        PerturbationKind::Color => 1,
        PerturbationKind::Distractor => 2,
        PerturbationKind::Occlusion => 3,
    }
}

fn perturbation_from_tag(tag: u32) -> Result<PerturbationKind> {
    Ok(match tag {
        0 => PerturbationKind::None,
        1 => PerturbationKind::Color,
        2 => PerturbationKind::Distractor,
        3 => PerturbationKind::Occlusion,
        _ => return Err(Error::Format(format!("unknown perturbation tag {tag}"))),
    })
}

pub fn save_dataset(path: &Path, ds: &DemoDataset) -> Result<()> {
    write_container(path, DATASET_MAGIC, DATASET_VERSION, &ds.payload())
}

pub fn load_dataset(path: &Path) -> Result<DemoDataset> {
    let payload = read_container(path, DATASET_MAGIC, DATASET_VERSION)?;
    let content_hash = crc32(&payload);
    let mut r = ByteReader::new(&payload);
    let env_config: EnvConfig = serde_json::from_str(&r.get_str()?)
        .map_err(|e| Error::Format(format!("bad env config: {e}")))?;
    let control: ControlConfig = serde_json::from_str(&r.get_str()?)
        .map_err(|e| Error::Format(format!("bad control config: {e}")))?;
    let env_config_hash = r.get_u32()?;
    let expert_seed = r.get_u64()?;
    let count = r.get_u64()? as usize;
    let action_norm = ActionNorm {
        min: r.get_f64_vec()?,
        max: r.get_f64_vec()?,
    };
    let proprio_norm = ObsNorm {
        mean: r.get_f64_vec()?,
        std: r.get_f64_vec()?,
    };
    let vision_norm = ObsNorm {
        mean: r.get_f64_vec()?,
        std: r.get_f64_vec()?,
    };
    let n_eps = r.get_u32()? as usize;
    let mut episodes = Vec::with_capacity(n_eps);
    for _ in 0..n_eps {
        let steps = r.get_u32()? as usize;
        let mut observations = Vec::with_capacity(steps);
        for _ in 0..steps {
            observations.push(RenderedObs {
                proprio: r.get_f64_vec()?,
                vision: r.get_f64_vec()?,
            });
        }
        let mut actions = Vec::with_capacity(steps);
        for _ in 0..steps {
            actions.push(r.get_f64_vec()?);
        }
        let success = r.get_u32()? != 0;
        let perturbation = perturbation_from_tag(r.get_u32()?)?;
        let seed = r.get_u64()?;
        episodes.push(EpisodeRecord {
            observations,
            actions,
            success,
            perturbation,
            seed,
        });
    }
    r.finish()?;
    Ok(DemoDataset {
        episodes,
        env_config,
        control,
        action_norm,
        proprio_norm,
        vision_norm,
        provenance: Provenance {
            env_config_hash,
            expert_seed,
            count,
            content_hash,
        },
    })
}

// ---- experiment results --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub priority: String,
    pub scale: String,
    pub perturbation: String,
    pub demos: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

/// Per-group mean and std of success over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub priority: String,
    pub scale: String,
    pub perturbation: String,
    pub demos: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

impl ResultTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("bad result table: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,priority,scale,perturbation,demos,seed,success_rate,episodes\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method,
                r.priority,
                r.scale,
                r.perturbation,
                r.demos,
                r.seed,
                r.success_rate,
                r.episodes
            ));
        }
        out
    }

    /// Mean and sample standard deviation of success over seeds for each
    /// (method, priority, scale, perturbation, demos) group, in first-seen
    /// group order.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut order: Vec<(String, String, String, String, usize)> = Vec::new();
        let mut buckets: std::collections::HashMap<_, Vec<f64>> = std::collections::HashMap::new();
        for r in &self.rows {
            let key = (
                r.method.clone(),
                r.priority.clone(),
                r.scale.clone(),
                r.perturbation.clone(),
                r.demos,
            );
            if !buckets.contains_key(&key) {
                order.push(key.clone());
            }
            buckets.entry(key).or_default().push(r.success_rate);
        }
        order
            .into_iter()
            .map(|key| {
                let vals = &buckets[&key];
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                AggregateRow {
                    method: key.0,
                    priority: key.1,
                    scale: key.2,
                    perturbation: key.3,
                    demos: key.4,
                    mean,
                    std,
                    seeds: vals.len(),
                }
            })
            .collect()
    }
}
