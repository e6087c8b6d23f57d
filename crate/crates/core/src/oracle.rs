//! Analytic conditional Gaussian-mixture tasks with closed-form diffused
//! scores. These serve as ground truth for score accuracy of trained models
//! and for the base/residual factorization check.
//!
//! For a component with action mean `A y + b` and diagonal covariance S, the
//! alpha_bar_t-diffused conditional density of x_t is
//! `N(sqrt(ab) (A y + b), ab S + (1 - ab) I)`. Marginalizing standard-normal
//! dropped modalities keeps everything Gaussian with covariance
//! `ab (S + A_d A_d^T) + (1 - ab) I`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, Score};

/// Affine map from a concatenated modality vector to an action-space mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// Row-major, action_dim x y_dim.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let d = self.offset.len();
        let ydim = if d == 0 { 0 } else { self.matrix.len() / d };
        debug_assert_eq!(y.len(), ydim);
        let mut out = self.offset.clone();
        for r in 0..d {
            let row = &self.matrix[r * ydim..(r + 1) * ydim];
            for (a, b) in row.iter().zip(y) {
                out[r] += a * b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean_map: AffineMap,
    /// Diagonal covariance of the action given all modalities.
    pub covariance: Vec<f64>,
}

/// Generating distribution of the de-prioritized modalities, needed to
/// marginalize them for the base score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroppedPrior {
    StandardNormal,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureTask {
    pub components: Vec<MixtureComponent>,
    pub modality_dims: Vec<usize>,
    pub priority_k: usize,
    pub dropped_prior: DroppedPrior,
}

impl GaussianMixtureTask {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {wsum}, not 1")));
        }
        if self.priority_k == 0 || self.priority_k >= self.modality_dims.len() {
            return Err(Error::invalid("priority_k must be in [1, M)"));
        }
        let d = self.action_dim();
        let ydim = self.y_dim();
        for c in &self.components {
            if c.weight <= 0.0 {
                return Err(Error::invalid("component weights must be positive"));
            }
            if c.covariance.len() != d || c.covariance.iter().any(|&v| v <= 0.0) {
                return Err(Error::invalid("covariances must be strictly positive"));
            }
            if c.mean_map.offset.len() != d || c.mean_map.matrix.len() != d * ydim {
                return Err(Error::invalid("mean map dims inconsistent"));
            }
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.components[0].covariance.len()
    }

    pub fn y_dim(&self) -> usize {
        self.modality_dims.iter().sum()
    }

    /// Concatenated dim of the prioritized modalities y^{1:k}.
    pub fn prior_dim(&self) -> usize {
        self.modality_dims[..self.priority_k].iter().sum()
    }

    fn check_y(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.y_dim() {
            return Err(Error::invalid(format!(
                "y dim {} != sum of modality dims {}",
                y.len(),
                self.y_dim()
            )));
        }
        Ok(())
    }

    fn check_y_prior(&self, y_prior: &[f64]) -> Result<()> {
        if y_prior.len() != self.prior_dim() {
            return Err(Error::invalid(format!(
                "y_prior dim {} != prioritized dim {}",
                y_prior.len(),
                self.prior_dim()
            )));
        }
        Ok(())
    }
}

/// The three score terms of the Bayes factorization.
#[derive(Debug, Clone)]
pub struct OracleScore {
    pub full: Score,
    pub base: Score,
    pub residual: Score,
}

fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

const LOG_2PI: f64 = 1.8378770664093453;

/// Score of p_t(x_t | y^{1:M}): responsibility-weighted sum of diffused
/// per-component Gaussian scores.
pub fn oracle_full_score(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Score> {
    Ok(Score {
        value: full_score_and_logpdf(task, x_t, t, y, schedule)?.0,
        t,
    })
}

/// Log of the diffused full-conditional density.
pub fn oracle_full_logpdf(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(full_score_and_logpdf(task, x_t, t, y, schedule)?.1)
}

fn full_score_and_logpdf(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y: &[f64],
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, f64)> {
    task.validate()?;
    task.check_y(y)?;
    let d = task.action_dim();
    if x_t.len() != d {
        return Err(Error::invalid("x_t dim mismatch"));
    }
    let ab = schedule.alpha_bar(t);
    let sab = ab.sqrt();
    let mut logps = Vec::with_capacity(task.components.len());
    let mut comp_scores = Vec::with_capacity(task.components.len());
    for c in &task.components {
        let mu = c.mean_map.apply(y);
        let mut logp = c.weight.ln();
        let mut score = vec![0.0; d];
        for i in 0..d {
            let m = sab * mu[i];
            let v = ab * c.covariance[i] + (1.0 - ab);
            let r = x_t[i] - m;
            logp += -0.5 * (LOG_2PI + v.ln()) - r * r / (2.0 * v);
            score[i] = -r / v;
        }
        logps.push(logp);
        comp_scores.push(score);
    }
    mix(&logps, &comp_scores, d)
}

fn mix(logps: &[f64], comp_scores: &[Vec<f64>], d: usize) -> Result<(Vec<f64>, f64)> {
    let total = logsumexp(logps);
    let mut score = vec![0.0; d];
    for (lp, cs) in logps.iter().zip(comp_scores) {
        let resp = (lp - total).exp();
        for i in 0..d {
            score[i] += resp * cs[i];
        }
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite oracle score".into()));
    }
    Ok((score, total))
}

// ---- dense SPD helpers for the marginalized covariance -------------------

/// Cholesky factor (lower) of a symmetric positive definite matrix.
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NumericDomain("matrix not positive definite".into()));
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b given the Cholesky factor of A.
fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn chol_logdet(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Score of p_t(x_t | y^{1:k}) with the dropped modalities marginalized out
/// in closed form (standard-normal generating distribution).
pub fn oracle_base_score(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y_prior: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Score> {
    Ok(Score {
        value: base_score_and_logpdf(task, x_t, t, y_prior, schedule)?.0,
        t,
    })
}

pub fn oracle_base_logpdf(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y_prior: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(base_score_and_logpdf(task, x_t, t, y_prior, schedule)?.1)
}

fn base_score_and_logpdf(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y_prior: &[f64],
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, f64)> {
    task.validate()?;
    task.check_y_prior(y_prior)?;
    if task.dropped_prior != DroppedPrior::StandardNormal {
        return Err(Error::UnsupportedTask(
            "exact marginalization needs a standard-normal dropped-modality prior".into(),
        ));
    }
    let d = task.action_dim();
    if x_t.len() != d {
        return Err(Error::invalid("x_t dim mismatch"));
    }
    let kp = task.prior_dim();
    let ydim = task.y_dim();
    let nd = ydim - kp;
    let ab = schedule.alpha_bar(t);
    let sab = ab.sqrt();

    let mut logps = Vec::with_capacity(task.components.len());
    let mut comp_scores = Vec::with_capacity(task.components.len());
    for c in &task.components {
        // mean with dropped modalities at their prior mean (zero)
        let mut mu = c.mean_map.offset.clone();
        for r in 0..d {
            let row = &c.mean_map.matrix[r * ydim..(r + 1) * ydim];
            for (a, b) in row[..kp].iter().zip(y_prior) {
                mu[r] += a * b;
            }
        }
        // covariance: ab (S + A_d A_d^T) + (1 - ab) I
        let mut cov = vec![0.0; d * d];
        for r in 0..d {
            let rowr = &c.mean_map.matrix[r * ydim + kp..(r + 1) * ydim];
            for s in 0..d {
                let rows = &c.mean_map.matrix[s * ydim + kp..(s + 1) * ydim];
                let mut acc = 0.0;
                for q in 0..nd {
                    acc += rowr[q] * rows[q];
                }
                let mut v = ab * acc;
                if r == s {
                    v += ab * c.covariance[r] + (1.0 - ab);
                }
                cov[r * d + s] = v;
            }
        }
        let l = cholesky(&cov, d)?;
        let resid: Vec<f64> = x_t.iter().zip(&mu).map(|(x, m)| x - sab * m).collect();
        let sol = chol_solve(&l, d, &resid);
        let maha: f64 = resid.iter().zip(&sol).map(|(r, s)| r * s).sum();
        let logp =
            c.weight.ln() - 0.5 * (d as f64 * LOG_2PI + chol_logdet(&l, d)) - 0.5 * maha;
        logps.push(logp);
        comp_scores.push(sol.iter().map(|s| -s).collect());
    }
    mix(&logps, &comp_scores, d)
}

/// Monte-Carlo estimate of the base score with `samples` draws of the
/// dropped modalities; returns the score and a per-dimension standard error
/// from 10 batch means.
pub fn oracle_base_score_mc(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y_prior: &[f64],
    schedule: &NoiseSchedule,
    samples: usize,
    rng: &mut Rng,
) -> Result<(Score, Vec<f64>)> {
    task.validate()?;
    task.check_y_prior(y_prior)?;
    if task.dropped_prior != DroppedPrior::StandardNormal {
        return Err(Error::UnsupportedTask(
            "Monte-Carlo marginalization needs a known dropped-modality prior".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    let d = task.action_dim();
    let nd = task.y_dim() - task.prior_dim();
    let batches = samples.min(10);
    let per_batch = samples.div_ceil(batches);
    let mut batch_scores: Vec<Vec<f64>> = Vec::new();
    for _ in 0..batches {
        let mut logw = Vec::new();
        let mut scores = Vec::new();
        for _ in 0..per_batch {
            let y_drop = rng.normal_vec(nd);
            let mut y = Vec::with_capacity(task.y_dim());
            y.extend_from_slice(y_prior);
            y.extend_from_slice(&y_drop);
            let (s, lp) = full_score_and_logpdf(task, x_t, t, &y, schedule)?;
            logw.push(lp);
            scores.push(s);
        }
        batch_scores.push(mix(&logw, &scores, d)?.0);
    }
    let mut mean = vec![0.0; d];
    for b in &batch_scores {
        for i in 0..d {
            mean[i] += b[i] / batches as f64;
        }
    }
    let mut stderr = vec![0.0; d];
    if batches > 1 {
        for b in &batch_scores {
            for i in 0..d {
                stderr[i] += (b[i] - mean[i]).powi(2);
            }
        }
        for s in &mut stderr {
            *s = (*s / (batches as f64 - 1.0) / batches as f64).sqrt();
        }
    }
    Ok((Score { value: mean, t }, stderr))
}

/// All three Bayes-factorization terms; the residual is full - base exactly.
pub fn oracle_scores(
    task: &GaussianMixtureTask,
    x_t: &[f64],
    t: usize,
    y: &[f64],
    schedule: &NoiseSchedule,
) -> Result<OracleScore> {
    let full = oracle_full_score(task, x_t, t, y, schedule)?;
    let y_prior = &y[..task.prior_dim()];
    let base = oracle_base_score(task, x_t, t, y_prior, schedule)?;
    let residual = Score {
        value: full
            .value
            .iter()
            .zip(&base.value)
            .map(|(f, b)| f - b)
            .collect(),
        t,
    };
    Ok(OracleScore {
        full,
        base,
        residual,
    })
}

// ---- theorem verification ------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TheoremStat {
    pub t: usize,
    pub max_abs: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub per_t: Vec<TheoremStat>,
    pub overall_rms: f64,
}

impl TheoremReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fold per-step error lists into per-step and overall statistics.
pub fn aggregate_errors(per_t: Vec<(usize, Vec<f64>)>) -> TheoremReport {
    let mut stats = Vec::new();
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for (t, errs) in per_t {
        let max_abs = errs.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let sq: f64 = errs.iter().map(|e| e * e).sum();
        sq_sum += sq;
        count += errs.len();
        stats.push(TheoremStat {
            t,
            max_abs,
            rms: (sq / errs.len() as f64).sqrt(),
        });
    }
    TheoremReport {
        per_t: stats,
        overall_rms: (sq_sum / count.max(1) as f64).sqrt(),
    }
}

/// Evaluation grid: 101 equally spaced points spanning +/- 4 diffused
/// standard deviations of the full-conditional mixture (1D tasks).
pub fn default_grid(
    task: &GaussianMixtureTask,
    y: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    task.validate()?;
    if task.action_dim() != 1 {
        return Err(Error::UnsupportedTask("default grid is 1D".into()));
    }
    let ab = schedule.alpha_bar(t);
    let sab = ab.sqrt();
    let mut mean = 0.0;
    let mut second = 0.0;
    for c in &task.components {
        let m = sab * c.mean_map.apply(y)[0];
        let v = ab * c.covariance[0] + (1.0 - ab);
        mean += c.weight * m;
        second += c.weight * (v + m * m);
    }
    let std = (second - mean * mean).max(1e-12).sqrt();
    Ok((0..101)
        .map(|i| mean - 4.0 * std + 8.0 * std * i as f64 / 100.0)
        .collect())
}

/// Construction check: |full - (base + residual)| over the grid; zero by
/// definition of the residual term.
pub fn verify_construction(
    task: &GaussianMixtureTask,
    y: &[f64],
    grid: &[Vec<f64>],
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Result<TheoremReport> {
    let mut per_t = Vec::new();
    for &t in ts {
        let mut errs = Vec::new();
        for x in grid {
            let s = oracle_scores(task, x, t, y, schedule)?;
            for i in 0..x.len() {
                errs.push((s.full.value[i] - s.base.value[i]) - s.residual.value[i]);
            }
        }
        per_t.push((t, errs));
    }
    Ok(aggregate_errors(per_t))
}

/// Trained-model check: `eps_fn(x_t, y, t)` is the composed noise
/// prediction; its implied score is compared with the analytic full score
/// over the grid, per step.
pub fn verify_model_scores(
    task: &GaussianMixtureTask,
    y: &[f64],
    grid: &[Vec<f64>],
    ts: &[usize],
    schedule: &NoiseSchedule,
    eps_fn: &dyn Fn(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<TheoremReport> {
    let mut per_t = Vec::new();
    for &t in ts {
        let scale = (1.0 - schedule.alpha_bar(t)).sqrt();
        let mut errs = Vec::new();
        for x in grid {
            let oracle = oracle_full_score(task, x, t, y, schedule)?;
            let eps = eps_fn(x, t)?;
            for i in 0..x.len() {
                let model_score = -eps[i] / scale;
                // normalized units: compare eps-scale quantities
                errs.push(scale * (model_score - oracle.value[i]));
            }
        }
        per_t.push((t, errs));
    }
    Ok(aggregate_errors(per_t))
}
