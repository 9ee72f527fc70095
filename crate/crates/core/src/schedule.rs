//! Noise schedules and the forward/reverse diffusion updates.
//!
//! Timesteps are 1-based: `t = 1..=T`. `alpha_bar(t)` is the cumulative
//! signal fraction `∏_{s≤t}(1 − β_s)`, with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear { start: f64, end: f64 },
    Constant { beta: f64 },
}

/// Choice of the reverse-step standard deviation `σ_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `σ_t² = β_t`
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`
    Posterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: BetaKind,
    pub variance: ReverseVariance,
}

impl ScheduleConfig {
    /// Linear 1e-4 → 0.02 over 1000 steps.
    pub fn linear_default() -> Self {
        Self {
            steps: 1000,
            kind: BetaKind::Linear { start: 1e-4, end: 0.02 },
            variance: ReverseVariance::Beta,
        }
    }

    /// Constant β = 0.008 over 1000 steps, used for the latent model.
    pub fn constant_default() -> Self {
        Self {
            steps: 1000,
            kind: BetaKind::Constant { beta: 0.008 },
            variance: ReverseVariance::Beta,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = match self.kind {
            BetaKind::Linear { start, end } => linear_schedule(self.steps, start, end)?,
            BetaKind::Constant { beta } => constant_schedule(self.steps, beta)?,
        };
        s.set_variance(self.variance);
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    variance: ReverseVariance,
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "linear betas must satisfy 0 < start ≤ end < 1, got {beta_start} → {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    Ok(NoiseSchedule::from_betas(betas))
}

pub fn constant_schedule(steps: usize, beta: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(0.0 < beta && beta < 1.0) {
        return Err(Error::config(format!("constant beta must lie in (0, 1), got {beta}")));
    }
    Ok(NoiseSchedule::from_betas(vec![beta; steps]))
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let mut s = Self {
            sigmas: Vec::new(),
            betas,
            alpha_bars,
            variance: ReverseVariance::Beta,
        };
        s.set_variance(ReverseVariance::Beta);
        s
    }

    pub fn set_variance(&mut self, variance: ReverseVariance) {
        self.variance = variance;
        self.sigmas = (1..=self.steps())
            .map(|t| {
                let b = self.beta(t);
                match variance {
                    ReverseVariance::Beta => b.sqrt(),
                    ReverseVariance::Posterior => {
                        (b * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
                    }
                }
            })
            .collect();
    }

    pub fn variance(&self) -> ReverseVariance {
        self.variance
    }

    /// `T`
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_with(eps, |x, e| a * x + b * e)
}

/// Ancestral step `x_t → x_{t−1}`; `noise` is ignored at `t = 1`.
pub fn ddpm_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t)?;
    x_t.same_shape(eps_hat)?;
    x_t.same_shape(noise)?;
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t) };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| inv * (x - coef * e) + sigma * z)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Predicted clean sample `(x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar({t}) is zero")));
    }
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_with(eps_hat, |x, e| (x - sb * e) / sa)
}

/// DDIM update `x_t → x_{t_prev}`. With `eta = 0` the step is deterministic
/// and `noise` may be `None`; `t_prev = 0` returns the `x̂0` estimate.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::contract(format!("ddim needs t_prev < t, got {t_prev} ≥ {t}")));
    }
    let x0 = predict_x0(x_t, eps_hat, t, sched)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let sp = ab_prev.sqrt();
    let mut out = x0.zip_with(eps_hat, |x, e| sp * x + dir * e)?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::contract("ddim with eta > 0 needs noise"))?;
        out.axpy(sigma, z)?;
    }
    Ok(out)
}

/// `S` evenly spaced, strictly increasing timesteps ending at `T`.
pub fn timestep_subsequence(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::config(format!(
            "sampling steps must lie in 1..={total}, got {count}"
        )));
    }
    Ok((1..=count).map(|k| k * total / count).collect())
}
