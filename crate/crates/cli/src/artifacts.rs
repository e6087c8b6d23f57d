//! Output-directory layout plus model persistence. Single-net methods store
//! one policy checkpoint, composed methods one base+residual checkpoint, and
//! the two-model baseline a pair of files sharing a stem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fdp_core::nets::{load_composed, load_policy, load_residual, save_composed, save_policy, save_residual};
use fdp_core::sampling::PolicySet;
use fdp_core::{Error, Method, Result, ResultRow, TrainedModel};

#[derive(Debug, Clone)]
pub struct Paths {
    out: PathBuf,
}

/// Identity of one trained model (perturbations share models).
#[derive(Debug, Clone, Copy)]
pub struct ModelKey<'a> {
    pub method: Method,
    pub priority: &'a str,
    pub scale: &'a str,
    pub demos: usize,
    pub seed: u64,
}

impl Paths {
    pub fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Paths { out: out.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.out
    }

    pub fn dataset(&self, scale: &str, demos: usize, seed: u64) -> PathBuf {
        self.out.join(format!("data_{scale}_{demos}_{seed}.fdpd"))
    }

    fn model_stem(&self, k: &ModelKey) -> String {
        format!(
            "model_{}_{}_{}_{}_{}",
            k.method.name(),
            k.priority,
            k.scale,
            k.demos,
            k.seed
        )
    }

    pub fn model(&self, k: &ModelKey) -> PathBuf {
        self.out.join(format!("{}.fdpc", self.model_stem(k)))
    }

    pub fn model_second(&self, k: &ModelKey) -> PathBuf {
        self.out.join(format!("{}_ind.fdpc", self.model_stem(k)))
    }

    pub fn train_log(&self, k: &ModelKey) -> PathBuf {
        self.out.join(format!(
            "train_{}_{}_{}_{}_{}.jsonl",
            k.method.name(),
            k.priority,
            k.scale,
            k.demos,
            k.seed
        ))
    }

    pub fn eval(&self, k: &ModelKey, perturbation: &str) -> PathBuf {
        self.out.join(format!(
            "eval_{}_{}_{}_{}_{}_{}.json",
            k.method.name(),
            k.priority,
            k.scale,
            perturbation,
            k.demos,
            k.seed
        ))
    }

    pub fn score_check(&self, mode: &str) -> PathBuf {
        self.out.join(format!("score_check_{mode}.json"))
    }
}

/// One completed evaluation cell; `env_hash` is the hash of the unperturbed
/// training environment so a report can refuse mixed provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub version: String,
    pub config_hash: u32,
    pub env_hash: u32,
    pub row: ResultRow,
}

pub fn save_model(paths: &Paths, key: &ModelKey, model: &TrainedModel) -> Result<()> {
    let path = paths.model(key);
    match model.method {
        Method::Joint | Method::BaseOnly | Method::Cfg => {
            let net = model.set.joint.as_ref().ok_or_else(|| Error::Contract("missing joint net".into()))?;
            save_policy(&path, net)
        }
        Method::FdpOutput | Method::FdpBlockwise => {
            let policy = model
                .set
                .composed
                .as_ref()
                .ok_or_else(|| Error::Contract("missing composed policy".into()))?;
            save_composed(&path, policy)
        }
        Method::Poco => {
            let base = model
                .set
                .poco_base
                .as_ref()
                .ok_or_else(|| Error::Contract("missing base net".into()))?;
            let ind = model
                .set
                .poco_independent
                .as_ref()
                .ok_or_else(|| Error::Contract("missing independent net".into()))?;
            save_policy(&path, base)?;
            save_residual(&paths.model_second(key), ind)
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingDependency(format!(
            "missing artifact {}; run the producing stage first",
            path.display()
        )))
    }
}

pub fn load_model(paths: &Paths, key: &ModelKey) -> Result<TrainedModel> {
    let path = paths.model(key);
    require_file(&path)?;
    let set = match key.method {
        Method::Joint | Method::BaseOnly | Method::Cfg => PolicySet::from_joint(load_policy(&path)?),
        Method::FdpOutput | Method::FdpBlockwise => PolicySet::from_composed(load_composed(&path)?),
        Method::Poco => {
            let second = paths.model_second(key);
            require_file(&second)?;
            PolicySet::from_poco(load_policy(&path)?, load_residual(&second)?)
        }
    };
    Ok(TrainedModel {
        method: key.method,
        set,
        stages: Vec::new(),
    })
}

pub fn model_exists(paths: &Paths, key: &ModelKey) -> bool {
    paths.model(key).is_file()
        && (key.method != Method::Poco || paths.model_second(key).is_file())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
