//! Residual noise-prediction network eps_phi with zero-initialized coupling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::policy::param_checksum;
use super::{NetConfig, Trunk, TrunkCache};

/// How the residual combines with its frozen base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    /// eps = eps_base + eps_res; the residual head is zero-initialized.
    OutputCompose,
    /// Each base block consumes its input shifted by the zero layer applied
    /// to the residual stream's matching block output; the base head closes.
    BlockwiseCompose,
}

/// Mirror of [`super::PolicyNet`] conditioned on all M modalities, plus one
/// zero-initialized coupling layer per block. At initialization both the
/// coupling layers and the output head are exactly zero, so any composition
/// with a base net reproduces the base.
#[derive(Debug, Clone)]
pub struct ResidualNet {
    trunk: Trunk,
    params: Vec<f64>,
    mode: ComposeMode,
}

impl ResidualNet {
    pub fn new(cfg: NetConfig, mode: ComposeMode, seed: u64) -> Result<Self> {
        let trunk = Trunk::new(cfg, true)?;
        let params = trunk.init_params(seed, true);
        Ok(ResidualNet { trunk, params, mode })
    }

    pub fn from_params(cfg: NetConfig, mode: ComposeMode, params: Vec<f64>) -> Result<Self> {
        let trunk = Trunk::new(cfg, true)?;
        assert_eq!(params.len(), trunk.num_params(), "parameter count mismatch");
        Ok(ResidualNet { trunk, params, mode })
    }

    pub fn config(&self) -> &NetConfig {
        self.trunk.config()
    }

    pub fn mode(&self) -> ComposeMode {
        self.mode
    }

    pub(crate) fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params()
    }

    pub fn checksum(&self) -> u32 {
        param_checksum(&self.params)
    }

    /// Standalone forward through the residual's own head (output-compose
    /// path, and the independently trained model used for PoCo composition).
    pub fn forward(&self, x_t: &[f64], cond: &[&[f64]], t: usize) -> Result<Vec<f64>> {
        let (out, _) = self.trunk.forward_cached(&self.params, x_t, cond, None, t)?;
        Ok(out)
    }

    pub fn forward_cached(
        &self,
        x_t: &[f64],
        cond: &[&[f64]],
        t: usize,
    ) -> Result<(Vec<f64>, TrunkCache)> {
        self.trunk.forward_cached(&self.params, x_t, cond, None, t)
    }

    pub fn backward(&self, cache: &TrunkCache, d_out: &[f64], grads: &mut [f64]) {
        self.trunk.backward(&self.params, cache, d_out, grads);
    }

    pub(crate) fn check_blockwise_pair(&self, base_blocks: usize) -> Result<()> {
        if self.mode == ComposeMode::BlockwiseCompose && self.config().blocks != base_blocks {
            return Err(Error::invalid(format!(
                "blockwise composition needs matching block counts (base {base_blocks}, residual {})",
                self.config().blocks
            )));
        }
        Ok(())
    }
}
