//! Noise schedule and closed-form diffusion quantities.
//!
//! Timesteps are 1-based (`1..=T`) at every public entry point; the schedule
//! arrays are 0-based, so step `t` lives at index `t - 1`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// Betas linearly interpolated between the endpoints, both inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 1 {
            return Err(validation("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(validation(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (timesteps - 1) as f64;
            (0..timesteps).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(validation("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(validation(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
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

    /// Cumulative product up to `t`; `alpha_bar(0)` is 1 by definition.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Fixed reverse-process variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - ab)
    }
}

/// Diagonal Gaussian with a shared scalar variance.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub variance: f64,
}

/// `z_t = √ᾱ_t · z_0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(validation(format!(
            "noise shape {:?} differs from latent shape {:?}",
            eps.dims(),
            z0.dims()
        )));
    }
    let ab = sched.alpha_bar(t);
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Batched forward marginal with one timestep per leading-axis entry.
pub fn q_sample_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(validation("noise and latent shapes differ"));
    }
    if z0.dim(0)? != ts.len() {
        return Err(validation("one timestep per batch entry required"));
    }
    for &t in ts {
        sched.check_t(t)?;
    }
    let mut bshape = vec![ts.len()];
    bshape.extend(std::iter::repeat_n(1, z0.rank() - 1));
    let signal: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let noise: Vec<f64> = ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    let signal = Tensor::from_vec(signal, bshape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    let noise = Tensor::from_vec(noise, bshape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Anything that predicts the noise of a batch of noisy latents.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

/// Mean squared error between the injected noise and its prediction, as a
/// differentiable scalar tensor.
pub fn dm_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let z_t = q_sample_batch(z0, ts, eps, sched)?;
    let eps_hat = predictor.predict_noise(&z_t, ts)?;
    if eps_hat.shape() != eps.shape() {
        return Err(validation(format!(
            "predictor returned {:?}, expected {:?}",
            eps_hat.dims(),
            eps.dims()
        )));
    }
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}

/// Reverse-process mean and fixed variance derived from a noise prediction.
pub fn posterior_params(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<GaussianParams> {
    sched.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(validation("noise prediction shape differs from latent"));
    }
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mean = ((z_t - (eps_hat * coef)?)? * (1.0 / sched.alpha(t).sqrt()))?;
    Ok(GaussianParams {
        mean,
        variance: sched.posterior_variance(t),
    })
}
