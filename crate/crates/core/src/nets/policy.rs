//! Base / joint noise-prediction network eps_theta.

use crate::error::Result;
use crate::io::crc32;

use super::{NetConfig, Trunk, TrunkCache};

/// Fully-connected noise-prediction network with time embedding and
/// per-modality conditioning. Used both as the base policy (conditioned on
/// y^{1:k}) and as the joint baseline (conditioned on y^{1:M}).
#[derive(Debug, Clone)]
pub struct PolicyNet {
    trunk: Trunk,
    params: Vec<f64>,
}

impl PolicyNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let trunk = Trunk::new(cfg, false)?;
        let params = trunk.init_params(seed, false);
        Ok(PolicyNet { trunk, params })
    }

    pub fn from_params(cfg: NetConfig, params: Vec<f64>) -> Result<Self> {
        let trunk = Trunk::new(cfg, false)?;
        assert_eq!(params.len(), trunk.num_params(), "parameter count mismatch");
        Ok(PolicyNet { trunk, params })
    }

    pub fn config(&self) -> &NetConfig {
        self.trunk.config()
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

    /// CRC32 of the little-endian parameter bytes; used for frozen-base checks.
    pub fn checksum(&self) -> u32 {
        param_checksum(&self.params)
    }

    /// Learned null tokens, one per conditioning modality.
    pub fn null_tokens(&self) -> Vec<Vec<f64>> {
        self.trunk.null_tokens(&self.params)
    }

    pub fn forward(&self, x_t: &[f64], cond: &[&[f64]], t: usize) -> Result<Vec<f64>> {
        let (out, _) = self.trunk.forward_cached(&self.params, x_t, cond, None, t)?;
        Ok(out)
    }

    /// Forward with the null token substituted for masked modalities.
    pub fn forward_masked(
        &self,
        x_t: &[f64],
        cond: &[&[f64]],
        null_mask: &[bool],
        t: usize,
    ) -> Result<Vec<f64>> {
        let (out, _) = self
            .trunk
            .forward_cached(&self.params, x_t, cond, Some(null_mask), t)?;
        Ok(out)
    }

    pub fn forward_cached(
        &self,
        x_t: &[f64],
        cond: &[&[f64]],
        null_mask: Option<&[bool]>,
        t: usize,
    ) -> Result<(Vec<f64>, TrunkCache)> {
        self.trunk
            .forward_cached(&self.params, x_t, cond, null_mask, t)
    }

    /// Accumulate parameter gradients for d(loss)/d(eps) = `d_out`.
    pub fn backward(&self, cache: &TrunkCache, d_out: &[f64], grads: &mut [f64]) {
        self.trunk.backward(&self.params, cache, d_out, grads);
    }
}

pub(crate) fn param_checksum(params: &[f64]) -> u32 {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for &p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    crc32(&bytes)
}
