//! Noise-prediction networks: a shared fully-connected trunk with time
//! embedding, per-modality conditioning encoders, and additive modulation
//! per block. [`PolicyNet`] is the base/joint model, [`ResidualNet`] adds
//! zero-initialized coupling layers for composition, and [`ComposedPolicy`]
//! wires the two together (output-sum or blockwise).
//!
//! All gradients are hand-derived; `Trunk` exposes the forward pieces with
//! caches and the matching backward pieces so composed models can route
//! gradients through a frozen base.

mod composed;
mod checkpoint;
mod policy;
mod residual;

pub use checkpoint::{load_composed, load_policy, load_residual, save_composed, save_policy, save_residual};
pub use composed::ComposedPolicy;
pub use policy::PolicyNet;
pub use residual::{ComposeMode, ResidualNet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Architecture of one trunk. `cond_dims` are the flattened (dim x horizon)
/// input sizes of the modalities this net conditions on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub action_dim: usize,
    pub cond_dims: Vec<usize>,
    pub hidden: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
}

impl NetConfig {
    pub fn new(action_dim: usize, cond_dims: Vec<usize>) -> Self {
        NetConfig {
            action_dim,
            cond_dims,
            hidden: 128,
            blocks: 4,
            time_embed_dim: 32,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.action_dim == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::invalid("net dims must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be positive and even"));
        }
        if self.cond_dims.is_empty() || self.cond_dims.contains(&0) {
            return Err(Error::invalid("cond_dims must be nonempty and positive"));
        }
        Ok(())
    }
}

// ---- small dense math ----------------------------------------------------

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    const C0: f64 = 0.7978845608028654; // sqrt(2/pi)
    const C1: f64 = 0.044715;
    0.5 * x * (1.0 + (C0 * (x + C1 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_prime(x: f64) -> f64 {
    const C0: f64 = 0.7978845608028654;
    const C1: f64 = 0.044715;
    let s = C0 * (x + C1 * x * x * x);
    let t = s.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * x * x)
}

/// out = W x, W row-major (rows x cols).
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[r] = acc;
    }
}

/// out += W x.
fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[r] += acc;
    }
}

/// dx += W^T dy.
fn matvec_t_add(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// dW += dy x^T (outer product accumulate).
fn outer_add(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), rows * cols);
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for (d, a) in drow.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sinusoidal embedding of the (1-based) step index.
pub(crate) fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

// ---- parameter layout ----------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Mat {
    fn slice<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.rows * self.cols]
    }

    fn slice_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.rows * self.cols]
    }
}

#[derive(Debug, Clone)]
struct BlockOffsets {
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
    modw: Mat,
}

/// Trunk architecture plus the flat-parameter layout. Parameters themselves
/// live in a plain `Vec<f64>` owned by the concrete net.
#[derive(Debug, Clone)]
pub struct Trunk {
    cfg: NetConfig,
    time_w: Mat,
    time_b: Mat,
    enc: Vec<(Mat, Mat)>,
    null: Vec<Mat>,
    in_w: Mat,
    in_b: Mat,
    blocks: Vec<BlockOffsets>,
    zeros: Vec<(Mat, Mat)>,
    head_w: Mat,
    head_b: Mat,
    skip_w: Mat,
    num_params: usize,
}

impl Trunk {
    pub fn new(cfg: NetConfig, has_zero_layers: bool) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let mut off = 0usize;
        let mut mat = |rows: usize, cols: usize| {
            let m = Mat { off, rows, cols };
            off += rows * cols;
            m
        };
        let time_w = mat(h, cfg.time_embed_dim);
        let time_b = mat(h, 1);
        let mut enc = Vec::new();
        let mut null = Vec::new();
        for &d in &cfg.cond_dims {
            enc.push((mat(h, d), mat(h, 1)));
        }
        for &d in &cfg.cond_dims {
            null.push(mat(d, 1));
        }
        let in_w = mat(h, cfg.action_dim + 2 * h);
        let in_b = mat(h, 1);
        let mut blocks = Vec::new();
        for _ in 0..cfg.blocks {
            blocks.push(BlockOffsets {
                w1: mat(h, h),
                b1: mat(h, 1),
                w2: mat(h, h),
                b2: mat(h, 1),
                modw: mat(h, h),
            });
        }
        let mut zeros = Vec::new();
        if has_zero_layers {
            for _ in 0..cfg.blocks {
                zeros.push((mat(h, h), mat(h, 1)));
            }
        }
        let head_w = mat(cfg.action_dim, h);
        let head_b = mat(cfg.action_dim, 1);
        let skip_w = mat(cfg.action_dim, h);
        Ok(Trunk {
            cfg,
            time_w,
            time_b,
            enc,
            null,
            in_w,
            in_b,
            blocks,
            zeros,
            head_w,
            head_b,
            skip_w,
            num_params: off,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Fan-in scaled-uniform weights, zero biases, zero coupling layers.
    /// The last block's modulation projection is Gaussian-initialized; with
    /// `zero_head` the output head starts at exactly zero. The time-gated
    /// input skip always starts at zero.
    pub fn init_params(&self, seed: u64, zero_head: bool) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params];
        let mut rng = Rng::seed(seed);
        let fan_in = |m: &Mat, p: &mut [f64], rng: &mut Rng| {
            let bound = 1.0 / (m.cols as f64).sqrt();
            for v in m.slice_mut(p) {
                *v = rng.uniform_in(-bound, bound);
            }
        };
        fan_in(&self.time_w, &mut p, &mut rng);
        for (w, _) in self.enc.clone() {
            fan_in(&w, &mut p, &mut rng);
        }
        fan_in(&self.in_w, &mut p, &mut rng);
        for (i, blk) in self.blocks.iter().enumerate() {
            fan_in(&blk.w1, &mut p, &mut rng);
            fan_in(&blk.w2, &mut p, &mut rng);
            if i + 1 == self.blocks.len() {
                for v in blk.modw.slice_mut(&mut p) {
                    *v = 0.02 * rng.normal();
                }
            } else {
                fan_in(&blk.modw, &mut p, &mut rng);
            }
        }
        if !zero_head {
            fan_in(&self.head_w, &mut p, &mut rng);
        }
        // null tokens start at zero; zero layers stay zero by construction
        p
    }

    pub(crate) fn null_token<'a>(&self, params: &'a [f64], m: usize) -> &'a [f64] {
        self.null[m].slice(params)
    }

    pub(crate) fn null_tokens(&self, params: &[f64]) -> Vec<Vec<f64>> {
        (0..self.cfg.cond_dims.len())
            .map(|m| self.null_token(params, m).to_vec())
            .collect()
    }
}

// ---- forward/backward ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockCache {
    hin: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    hout: Vec<f64>,
}

/// Everything needed to replay the trunk backward.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    x_t: Vec<f64>,
    temb: Vec<f64>,
    pret: Vec<f64>,
    tproj: Vec<f64>,
    cond_inputs: Vec<Vec<f64>>,
    null_used: Vec<bool>,
    cond: Vec<f64>,
    u0: Vec<f64>,
    pre0: Vec<f64>,
    h0: Vec<f64>,
    blocks: Vec<BlockCache>,
}

impl TrunkCache {
    pub fn block_output(&self, i: usize) -> &[f64] {
        &self.blocks[i].hout
    }

    pub fn final_hidden(&self) -> &[f64] {
        self.blocks
            .last()
            .map(|b| b.hout.as_slice())
            .unwrap_or(&self.h0)
    }
}

impl Trunk {
    fn check_inputs(&self, x_t: &[f64], cond: &[&[f64]]) -> Result<()> {
        if x_t.len() != self.cfg.action_dim {
            return Err(Error::invalid(format!(
                "x_t dim {} != action_dim {}",
                x_t.len(),
                self.cfg.action_dim
            )));
        }
        if cond.len() != self.cfg.cond_dims.len() {
            return Err(Error::invalid(format!(
                "{} conditioning vectors supplied, net expects {}",
                cond.len(),
                self.cfg.cond_dims.len()
            )));
        }
        for (m, (v, &d)) in cond.iter().zip(&self.cfg.cond_dims).enumerate() {
            if v.len() != d {
                return Err(Error::invalid(format!(
                    "conditioning modality {m}: dim {} != expected {d}",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// Embeddings, conditioning sum, and input layer; does not run blocks.
    /// `null_mask[m]` substitutes the learned null token for modality m.
    pub(crate) fn embed(
        &self,
        params: &[f64],
        x_t: &[f64],
        cond: &[&[f64]],
        null_mask: Option<&[bool]>,
        t: usize,
    ) -> Result<TrunkCache> {
        self.check_inputs(x_t, cond)?;
        let h = self.cfg.hidden;
        let temb = time_embedding(t, self.cfg.time_embed_dim);
        let mut pret = vec![0.0; h];
        matvec(self.time_w.slice(params), h, self.cfg.time_embed_dim, &temb, &mut pret);
        add_into(&mut pret, self.time_b.slice(params));
        let tproj: Vec<f64> = pret.iter().map(|&x| gelu(x)).collect();

        let mut cond_inputs = Vec::with_capacity(cond.len());
        let mut null_used = vec![false; cond.len()];
        let mut c = vec![0.0; h];
        for (m, v) in cond.iter().enumerate() {
            let use_null = null_mask.map(|nm| nm[m]).unwrap_or(false);
            let input: Vec<f64> = if use_null {
                null_used[m] = true;
                self.null_token(params, m).to_vec()
            } else {
                v.to_vec()
            };
            let (w, b) = &self.enc[m];
            matvec_add(w.slice(params), h, self.cfg.cond_dims[m], &input, &mut c);
            add_into(&mut c, b.slice(params));
            cond_inputs.push(input);
        }

        let mut u0 = Vec::with_capacity(self.cfg.action_dim + 2 * h);
        u0.extend_from_slice(x_t);
        u0.extend_from_slice(&tproj);
        u0.extend_from_slice(&c);
        let mut pre0 = vec![0.0; h];
        matvec(self.in_w.slice(params), h, u0.len(), &u0, &mut pre0);
        add_into(&mut pre0, self.in_b.slice(params));
        let h0: Vec<f64> = pre0.iter().map(|&x| gelu(x)).collect();

        Ok(TrunkCache {
            x_t: x_t.to_vec(),
            temb,
            pret,
            tproj,
            cond_inputs,
            null_used,
            cond: c,
            u0,
            pre0,
            h0,
            blocks: Vec::with_capacity(self.cfg.blocks),
        })
    }

    /// One residual block: hout = hin + W2 gelu(W1 hin + b1 + Mod c) + b2.
    pub(crate) fn block_forward(&self, params: &[f64], i: usize, hin: Vec<f64>, cond: &[f64]) -> BlockCache {
        let h = self.cfg.hidden;
        let blk = &self.blocks[i];
        let mut pre = vec![0.0; h];
        matvec(blk.w1.slice(params), h, h, &hin, &mut pre);
        add_into(&mut pre, blk.b1.slice(params));
        matvec_add(blk.modw.slice(params), h, h, cond, &mut pre);
        let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
        let mut hout = hin.clone();
        matvec_add(blk.w2.slice(params), h, h, &act, &mut hout);
        add_into(&mut hout, blk.b2.slice(params));
        BlockCache { hin, pre, act, hout }
    }

    pub(crate) fn run_blocks(&self, params: &[f64], cache: &mut TrunkCache) {
        let mut hcur = cache.h0.clone();
        for i in 0..self.cfg.blocks {
            let bc = self.block_forward(params, i, hcur, &cache.cond);
            hcur = bc.hout.clone();
            cache.blocks.push(bc);
        }
    }

    /// Output head plus a time-gated linear skip from the noisy input:
    /// out = Wh hidden + bh + (Ws tproj) .* x_t. The skip carries the
    /// asymptotically linear part of the noise prediction so the nonlinear
    /// trunk only has to model a bounded correction.
    pub(crate) fn head(&self, params: &[f64], hidden: &[f64], x_t: &[f64], tproj: &[f64]) -> Vec<f64> {
        let (d, h) = (self.cfg.action_dim, self.cfg.hidden);
        let mut out = vec![0.0; d];
        matvec(self.head_w.slice(params), d, h, hidden, &mut out);
        add_into(&mut out, self.head_b.slice(params));
        let mut gate = vec![0.0; d];
        matvec(self.skip_w.slice(params), d, h, tproj, &mut gate);
        for i in 0..d {
            out[i] += gate[i] * x_t[i];
        }
        out
    }

    /// Full forward with cache.
    pub(crate) fn forward_cached(
        &self,
        params: &[f64],
        x_t: &[f64],
        cond: &[&[f64]],
        null_mask: Option<&[bool]>,
        t: usize,
    ) -> Result<(Vec<f64>, TrunkCache)> {
        let mut cache = self.embed(params, x_t, cond, null_mask, t)?;
        self.run_blocks(params, &mut cache);
        let out = self.head(params, cache.final_hidden(), &cache.x_t, &cache.tproj);
        Ok((out, cache))
    }

    /// Zero coupling layer i applied to a residual-stream activation.
    pub(crate) fn zero_layer(&self, params: &[f64], i: usize, r: &[f64]) -> Vec<f64> {
        let h = self.cfg.hidden;
        let (w, b) = &self.zeros[i];
        let mut out = vec![0.0; h];
        matvec(w.slice(params), h, h, r, &mut out);
        add_into(&mut out, b.slice(params));
        out
    }

    // -- backward pieces --

    /// Returns (d hidden, d tproj from the skip). The tproj gradient must be
    /// folded into `input_backward` when this trunk's input layer is trained.
    pub(crate) fn head_backward(
        &self,
        params: &[f64],
        hidden: &[f64],
        x_t: &[f64],
        tproj: &[f64],
        d_out: &[f64],
        grads: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (d, h) = (self.cfg.action_dim, self.cfg.hidden);
        outer_add(self.head_w.slice_mut(grads), d, h, d_out, hidden);
        add_into(self.head_b.slice_mut(grads), d_out);
        let mut dh = vec![0.0; h];
        matvec_t_add(self.head_w.slice(params), d, h, d_out, &mut dh);
        let dg: Vec<f64> = d_out.iter().zip(x_t).map(|(g, x)| g * x).collect();
        outer_add(self.skip_w.slice_mut(grads), d, h, &dg, tproj);
        let mut d_tproj = vec![0.0; h];
        matvec_t_add(self.skip_w.slice(params), d, h, &dg, &mut d_tproj);
        (dh, d_tproj)
    }

    /// Backward through block i. Returns d(hin); accumulates d(cond) into
    /// `d_cond`.
    pub(crate) fn block_backward(
        &self,
        params: &[f64],
        i: usize,
        bc: &BlockCache,
        d_hout: &[f64],
        cond: &[f64],
        grads: &mut [f64],
        d_cond: &mut [f64],
    ) -> Vec<f64> {
        let h = self.cfg.hidden;
        let blk = &self.blocks[i];
        add_into(blk.b2.slice_mut(grads), d_hout);
        outer_add(blk.w2.slice_mut(grads), h, h, d_hout, &bc.act);
        let mut d_act = vec![0.0; h];
        matvec_t_add(blk.w2.slice(params), h, h, d_hout, &mut d_act);
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&bc.pre)
            .map(|(g, &x)| g * gelu_prime(x))
            .collect();
        add_into(blk.b1.slice_mut(grads), &d_pre);
        outer_add(blk.w1.slice_mut(grads), h, h, &d_pre, &bc.hin);
        outer_add(blk.modw.slice_mut(grads), h, h, &d_pre, cond);
        matvec_t_add(blk.modw.slice(params), h, h, &d_pre, d_cond);
        let mut d_hin = d_hout.to_vec();
        matvec_t_add(blk.w1.slice(params), h, h, &d_pre, &mut d_hin);
        d_hin
    }

    /// Backward through input layer, time projection, encoders, null tokens.
    /// `d_h0` is the gradient at the first hidden activation, `d_cond` the
    /// accumulated gradient at the conditioning vector from the blocks.
    pub(crate) fn input_backward(
        &self,
        params: &[f64],
        cache: &TrunkCache,
        d_h0: &[f64],
        mut d_cond: Vec<f64>,
        d_tproj_skip: Option<&[f64]>,
        grads: &mut [f64],
    ) {
        let h = self.cfg.hidden;
        let d = self.cfg.action_dim;
        let d_pre0: Vec<f64> = d_h0
            .iter()
            .zip(&cache.pre0)
            .map(|(g, &x)| g * gelu_prime(x))
            .collect();
        add_into(self.in_b.slice_mut(grads), &d_pre0);
        outer_add(self.in_w.slice_mut(grads), h, cache.u0.len(), &d_pre0, &cache.u0);
        let mut d_u0 = vec![0.0; cache.u0.len()];
        matvec_t_add(self.in_w.slice(params), h, cache.u0.len(), &d_pre0, &mut d_u0);

        // u0 = [x_t ; tproj ; cond]; the head skip also consumes tproj
        let mut d_tproj = d_u0[d..d + h].to_vec();
        if let Some(extra) = d_tproj_skip {
            add_into(&mut d_tproj, extra);
        }
        add_into(&mut d_cond, &d_u0[d + h..]);

        let d_pret: Vec<f64> = d_tproj
            .iter()
            .zip(&cache.pret)
            .map(|(g, &x)| g * gelu_prime(x))
            .collect();
        add_into(self.time_b.slice_mut(grads), &d_pret);
        outer_add(
            self.time_w.slice_mut(grads),
            h,
            self.cfg.time_embed_dim,
            &d_pret,
            &cache.temb,
        );

        for (m, input) in cache.cond_inputs.iter().enumerate() {
            let (w, b) = &self.enc[m];
            add_into(b.slice_mut(grads), &d_cond);
            outer_add(w.slice_mut(grads), h, self.cfg.cond_dims[m], &d_cond, input);
            if cache.null_used[m] {
                let mut d_null = vec![0.0; self.cfg.cond_dims[m]];
                matvec_t_add(w.slice(params), h, self.cfg.cond_dims[m], &d_cond, &mut d_null);
                add_into(self.null[m].slice_mut(grads), &d_null);
            }
        }
    }

    /// Full backward from d(eps); accumulates parameter gradients.
    pub(crate) fn backward(
        &self,
        params: &[f64],
        cache: &TrunkCache,
        d_out: &[f64],
        grads: &mut [f64],
    ) {
        let (mut dh, d_tproj_skip) =
            self.head_backward(params, cache.final_hidden(), &cache.x_t, &cache.tproj, d_out, grads);
        let mut d_cond = vec![0.0; self.cfg.hidden];
        for i in (0..self.cfg.blocks).rev() {
            dh = self.block_backward(params, i, &cache.blocks[i], &dh, &cache.cond, grads, &mut d_cond);
        }
        self.input_backward(params, cache, &dh, d_cond, Some(&d_tproj_skip), grads);
    }

    /// Zero-layer backward: accumulates layer grads, returns d(r).
    pub(crate) fn zero_layer_backward(
        &self,
        params: &[f64],
        i: usize,
        r: &[f64],
        d_z: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let h = self.cfg.hidden;
        let (w, b) = &self.zeros[i];
        add_into(b.slice_mut(grads), d_z);
        outer_add(w.slice_mut(grads), h, h, d_z, r);
        let mut d_r = vec![0.0; h];
        matvec_t_add(w.slice(params), h, h, d_z, &mut d_r);
        d_r
    }
}
