//! Base + residual composition with a frozen-base contract.

use crate::error::{Error, Result};
use crate::obs::ObservationBundle;

use super::residual::{ComposeMode, ResidualNet};
use super::{PolicyNet, TrunkCache};

/// A frozen base policy paired with a trainable residual.
#[derive(Debug, Clone)]
pub struct ComposedPolicy {
    base: PolicyNet,
    residual: ResidualNet,
    frozen: bool,
}

/// Forward caches for both streams; `base` holds the shifted block inputs in
/// blockwise mode.
#[derive(Debug, Clone)]
pub struct ComposedCache {
    pub(crate) base: TrunkCache,
    pub(crate) res: TrunkCache,
}

impl ComposedPolicy {
    pub fn new(base: PolicyNet, residual: ResidualNet) -> Result<Self> {
        residual.check_blockwise_pair(base.config().blocks)?;
        if residual.config().action_dim != base.config().action_dim {
            return Err(Error::invalid("base and residual action dims differ"));
        }
        Ok(ComposedPolicy {
            base,
            residual,
            frozen: true,
        })
    }

    pub fn mode(&self) -> ComposeMode {
        self.residual.mode()
    }

    pub fn base(&self) -> &PolicyNet {
        &self.base
    }

    pub fn residual(&self) -> &ResidualNet {
        &self.residual
    }

    pub fn residual_mut(&mut self) -> &mut ResidualNet {
        &mut self.residual
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Mutable base access; rejected while the base is frozen.
    pub fn base_mut(&mut self) -> Result<&mut PolicyNet> {
        if self.frozen {
            return Err(Error::Contract("base is frozen".into()));
        }
        Ok(&mut self.base)
    }

    pub fn into_parts(self) -> (PolicyNet, ResidualNet) {
        (self.base, self.residual)
    }

    fn split_bundle<'a>(&self, y: &'a ObservationBundle) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
        (y.prioritized_values(), y.all_values())
    }

    pub fn forward(&self, x_t: &[f64], y: &ObservationBundle, t: usize) -> Result<Vec<f64>> {
        let (prior, all) = self.split_bundle(y);
        self.forward_values(x_t, &prior, &all, t)
    }

    pub fn forward_values(
        &self,
        x_t: &[f64],
        prior: &[&[f64]],
        all: &[&[f64]],
        t: usize,
    ) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x_t, prior, all, t)?.0)
    }

    pub fn forward_cached(
        &self,
        x_t: &[f64],
        prior: &[&[f64]],
        all: &[&[f64]],
        t: usize,
    ) -> Result<(Vec<f64>, ComposedCache)> {
        match self.mode() {
            ComposeMode::OutputCompose => {
                let (base_out, base_cache) = self.base.forward_cached(x_t, prior, None, t)?;
                let (res_out, res_cache) = self.residual.forward_cached(x_t, all, t)?;
                let out = base_out
                    .iter()
                    .zip(&res_out)
                    .map(|(a, b)| a + b)
                    .collect();
                Ok((
                    out,
                    ComposedCache {
                        base: base_cache,
                        res: res_cache,
                    },
                ))
            }
            ComposeMode::BlockwiseCompose => self.forward_blockwise(x_t, prior, all, t),
        }
    }

    fn forward_blockwise(
        &self,
        x_t: &[f64],
        prior: &[&[f64]],
        all: &[&[f64]],
        t: usize,
    ) -> Result<(Vec<f64>, ComposedCache)> {
        let bt = self.base.trunk();
        let rt = self.residual.trunk();
        let bp = self.base.params();
        let rp = self.residual.params();

        // residual stream runs to completion first
        let mut res_cache = rt.embed(rp, x_t, all, None, t)?;
        rt.run_blocks(rp, &mut res_cache);

        // base stream: each block input is shifted by Z_i(res block i output)
        let mut base_cache = bt.embed(bp, x_t, prior, None, t)?;
        let blocks = bt.config().blocks;
        let mut g = base_cache.h0.clone();
        for i in 0..blocks {
            let z = rt.zero_layer(rp, i, res_cache.block_output(i));
            let gin: Vec<f64> = g.iter().zip(&z).map(|(a, b)| a + b).collect();
            let bc = bt.block_forward(bp, i, gin, &base_cache.cond);
            g = bc.hout.clone();
            base_cache.blocks.push(bc);
        }
        let out = bt.head(bp, &g, &base_cache.x_t, &base_cache.tproj);
        Ok((
            out,
            ComposedCache {
                base: base_cache,
                res: res_cache,
            },
        ))
    }

    /// Accumulate gradients of a scalar loss (with d(loss)/d(eps) = `d_out`)
    /// into `res_grads`, residual parameters only. Base activations carry
    /// the gradient in blockwise mode; base parameter gradients are dropped.
    pub fn backward_residual(&self, cache: &ComposedCache, d_out: &[f64], res_grads: &mut [f64]) {
        match self.mode() {
            ComposeMode::OutputCompose => {
                self.residual.backward(&cache.res, d_out, res_grads);
            }
            ComposeMode::BlockwiseCompose => self.backward_blockwise(cache, d_out, res_grads),
        }
    }

    fn backward_blockwise(&self, cache: &ComposedCache, d_out: &[f64], res_grads: &mut [f64]) {
        let bt = self.base.trunk();
        let rt = self.residual.trunk();
        let bp = self.base.params();
        let rp = self.residual.params();
        let blocks = bt.config().blocks;

        // base stream backward; base parameter grads go to a scratch buffer
        let mut base_scratch = vec![0.0; self.base.num_params()];
        let mut d_cond_base = vec![0.0; bt.config().hidden];
        // base skip gate depends only on base tproj and x_t, neither of which
        // is a function of residual parameters, so its tproj gradient is dropped
        let (mut dh, _) = bt.head_backward(
            bp,
            cache.base.final_hidden(),
            &cache.base.x_t,
            &cache.base.tproj,
            d_out,
            &mut base_scratch,
        );
        let mut d_rout: Vec<Vec<f64>> = vec![Vec::new(); blocks];
        for i in (0..blocks).rev() {
            let dgin = bt.block_backward(
                bp,
                i,
                &cache.base.blocks[i],
                &dh,
                &cache.base.cond,
                &mut base_scratch,
                &mut d_cond_base,
            );
            // gin = g_{i-1} + Z_i(rout_i)
            d_rout[i] = rt.zero_layer_backward(rp, i, cache.res.block_output(i), &dgin, res_grads);
            dh = dgin;
        }

        // residual chain backward: rout_i feeds Z_i and block i+1
        let mut d_cond_res = vec![0.0; rt.config().hidden];
        let mut dr = d_rout[blocks - 1].clone();
        let mut dh0 = Vec::new();
        for i in (0..blocks).rev() {
            let dhin = rt.block_backward(
                rp,
                i,
                &cache.res.blocks[i],
                &dr,
                &cache.res.cond,
                res_grads,
                &mut d_cond_res,
            );
            if i > 0 {
                dr = dhin;
                for (a, b) in dr.iter_mut().zip(&d_rout[i - 1]) {
                    *a += b;
                }
            } else {
                dh0 = dhin;
            }
        }
        rt.input_backward(rp, &cache.res, &dh0, d_cond_res, None, res_grads);
    }
}
