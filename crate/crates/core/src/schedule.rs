//! Discrete-time Gaussian diffusion mathematics: noise schedules, the forward
//! noising kernel, and the noise/score correspondence.
//!
//! Time steps are 1-based: `t` ranges over `1..=T`. `alpha_bar(t)` is the
//! cumulative product of `alpha(j)` for `j <= t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    SquaredCosine,
}

/// Discrete-time diffusion coefficients beta_t, alpha_t, alpha_bar_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    kind: ScheduleKind,
}

pub const LINEAR_BETA_RANGE: (f64, f64) = (1e-4, 0.02);
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Default configuration: 100-step DDPM with the squared-cosine curve.
pub const DEFAULT_NUM_STEPS: usize = 100;

pub fn build_schedule(kind: ScheduleKind, num_steps: usize) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::Linear => {
            build_linear(num_steps, LINEAR_BETA_RANGE.0, LINEAR_BETA_RANGE.1)
        }
        ScheduleKind::SquaredCosine => build_squared_cosine(num_steps),
    }
}

pub fn build_linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    check_steps(num_steps)?;
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let betas: Vec<f64> = (0..num_steps)
        .map(|i| {
            if num_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
            }
        })
        .collect();
    Ok(from_betas(betas, ScheduleKind::Linear))
}

fn build_squared_cosine(num_steps: usize) -> Result<NoiseSchedule> {
    check_steps(num_steps)?;
    let f = |u: f64| {
        let arg = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let target: Vec<f64> = (1..=num_steps)
        .map(|t| f(t as f64 / num_steps as f64) / f0)
        .collect();
    let mut betas = Vec::with_capacity(num_steps);
    let mut prev = 1.0;
    for &a in &target {
        let beta = (1.0 - a / prev).clamp(1e-12, MAX_BETA);
        betas.push(beta);
        prev *= 1.0 - beta;
    }
    Ok(from_betas(betas, ScheduleKind::SquaredCosine))
}

fn check_steps(num_steps: usize) -> Result<()> {
    if num_steps == 0 {
        return Err(Error::invalid("num_steps must be >= 1"));
    }
    Ok(())
}

fn from_betas(betas: Vec<f64>, kind: ScheduleKind) -> NoiseSchedule {
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(alphas.len());
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    NoiseSchedule {
        num_steps: betas.len(),
        betas,
        alphas,
        alpha_bars,
        kind,
    }
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::invalid(format!(
                "step t={t} out of range [1, {}]",
                self.num_steps
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// alpha_bar at `t`, with alpha_bar(0) = 1 by convention.
    pub fn alpha_bar_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// One forward-noised action sample; keeps the drawn noise for loss targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyAction {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps0: Vec<f64>,
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps0, eps0 ~ N(0, I).
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    rng: &mut Rng,
) -> Result<NoisyAction> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps0 = rng.normal_vec(x0.len());
    let x_t = x0
        .iter()
        .zip(&eps0)
        .map(|(x, e)| sa * x + sn * e)
        .collect();
    Ok(NoisyAction { x_t, t, eps0 })
}

/// Score of a diffused density at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub value: Vec<f64>,
    pub t: usize,
}

/// s = -eps / sqrt(1 - alpha_bar_t).
pub fn eps_to_score(eps: &[f64], schedule: &NoiseSchedule, t: usize) -> Result<Score> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::DegenerateStep { t });
    }
    let scale = -1.0 / (1.0 - ab).sqrt();
    Ok(Score {
        value: eps.iter().map(|e| scale * e).collect(),
        t,
    })
}

/// Inverse of [`eps_to_score`].
pub fn score_to_eps(score: &Score, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(score.t)?;
    let ab = schedule.alpha_bar(score.t);
    if ab >= 1.0 {
        return Err(Error::DegenerateStep { t: score.t });
    }
    let scale = -(1.0 - ab).sqrt();
    Ok(score.value.iter().map(|s| scale * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_linear() {
        let s = build_linear(1, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(build_schedule(ScheduleKind::Linear, 0).is_err());
    }

    #[test]
    fn squared_cosine_shape() {
        let s = build_schedule(ScheduleKind::SquaredCosine, 100).unwrap();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not decreasing at t={t}");
        }
        assert!(s.alpha_bar(1) > 0.99);
        assert!(s.alpha_bar(100) < 0.01);
        for &b in &s.betas {
            assert!(b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = build_schedule(ScheduleKind::Linear, 100).unwrap();
        let mut prod = 1.0;
        for t in 1..=100 {
            prod *= s.alpha(t);
            let rel = (s.alpha_bar(t) - prod).abs() / prod;
            assert!(rel < 1e-12);
        }
    }

    #[test]
    fn forward_noise_linearity() {
        let s = build_schedule(ScheduleKind::SquaredCosine, 100).unwrap();
        let mut rng = Rng::seed(1);
        let na = forward_noise(&s, &[0.0, 0.0], 40, &mut rng).unwrap();
        let sn = (1.0 - s.alpha_bar(40)).sqrt();
        for (x, e) in na.x_t.iter().zip(&na.eps0) {
            assert!((x - sn * e).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_t_out_of_range() {
        let s = build_schedule(ScheduleKind::Linear, 10).unwrap();
        let mut rng = Rng::seed(0);
        assert!(forward_noise(&s, &[1.0], 0, &mut rng).is_err());
        assert!(forward_noise(&s, &[1.0], 11, &mut rng).is_err());
    }

    #[test]
    fn forward_noise_moments() {
        // empirical mean/var over many draws vs (sqrt(ab) x0, 1 - ab)
        let s = build_schedule(ScheduleKind::SquaredCosine, 100).unwrap();
        let mut rng = Rng::seed(5);
        let x0 = [0.7];
        let t = 55;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let na = forward_noise(&s, &x0, t, &mut rng).unwrap();
            sum += na.x_t[0];
            sumsq += na.x_t[0] * na.x_t[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        let target_mean = ab.sqrt() * x0[0];
        let target_var = 1.0 - ab;
        let se_mean = (target_var / n as f64).sqrt();
        let se_var = target_var * (2.0 / n as f64).sqrt();
        assert!((mean - target_mean).abs() < 3.0 * se_mean);
        assert!((var - target_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn score_arithmetic() {
        let s = build_linear(1, 0.25, 0.25).unwrap(); // 1 - alpha_bar = 0.25
        let score = eps_to_score(&[1.0], &s, 1).unwrap();
        assert!((score.value[0] + 2.0).abs() < 1e-14);
        let zero = eps_to_score(&[0.0], &s, 1).unwrap();
        assert_eq!(zero.value[0], 0.0);
    }

    #[test]
    fn score_round_trip() {
        let s = build_schedule(ScheduleKind::SquaredCosine, 100).unwrap();
        for t in [1usize, 17, 100] {
            let eps = vec![0.3, -1.2, 4.5];
            let score = eps_to_score(&eps, &s, t).unwrap();
            let back = score_to_eps(&score, &s).unwrap();
            for (a, b) in eps.iter().zip(&back) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
