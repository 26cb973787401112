//! Noise schedules and the forward (noising) process.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`. Index 0 is reserved for the clean
//! image, with `alpha_bar(0) = 1`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{randn, RngState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t² = β_t`
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`
    BetaTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::BetaTilde,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.sigma_mode)
    }

    /// Builds a schedule from explicit per-step betas.
    pub fn from_betas(beta: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut running = 1.0;
        for a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        let sigma = beta
            .iter()
            .enumerate()
            .map(|(i, &b)| match sigma_mode {
                SigmaMode::Beta => b.sqrt(),
                SigmaMode::BetaTilde => {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    (b * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Timestep {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Same betas with a different reverse-step variance.
    pub fn with_sigma_mode(&self, mode: SigmaMode) -> Self {
        Self::from_betas(self.beta.clone(), mode).expect("betas already validated")
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`, endpoints included.
pub fn make_linear_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    if !(beta_start.is_finite() && beta_end.is_finite()) {
        return Err(Error::Config("non-finite beta bounds".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = if timesteps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        (0..timesteps)
            .map(|i| {
                if i == timesteps - 1 {
                    beta_end
                } else {
                    beta_start + step * i as f64
                }
            })
            .collect()
    };
    NoiseSchedule::from_betas(beta, sigma_mode)
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 − ᾱ_t) ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    x0.ensure_same_shape(eps, "q_sample noise")?;
    let ab = sched.alpha_bar(t);
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// [`q_sample`] with a separate timestep for every batch item.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.ensure_same_shape(eps, "q_sample noise")?;
    if ts.len() != x0.batch() {
        return Err(crate::error::shape_err(format!(
            "{} timesteps for batch of {}",
            ts.len(),
            x0.batch()
        )));
    }
    let items: Vec<Tensor> = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| q_sample(&x0.item(i), t, &eps.item(i), sched))
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

/// Applies the single-step chain `x_s = sqrt(1 − β_s) x_{s−1} + sqrt(β_s) z_s`
/// for `s = 1..=t`, drawing each `z_s` in order from `rng`.
pub fn q_sample_iterated(x0: &Tensor, t: usize, rng: RngState, sched: &NoiseSchedule) -> Result<Tensor> {
    let mut g = rng.generator();
    q_sample_iterated_with(x0, t, &mut g, sched)
}

pub fn q_sample_iterated_with(
    x0: &Tensor,
    t: usize,
    g: &mut ChaCha8Rng,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    let mut x = x0.clone();
    for s in 1..=t {
        let z = randn(x.shape(), g);
        let b = sched.beta(s);
        x = x.axpby((1.0 - b).sqrt(), &z, b.sqrt())?;
    }
    Ok(x)
}
