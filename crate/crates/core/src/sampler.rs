//! Reverse-process sampling: DDPM ancestral steps and DDIM subsequences.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{randn, RngState};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Length of the DDIM timestep subsequence; ignored by DDPM.
    pub num_steps: usize,
    pub eta: f64,
    pub clamp_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            num_steps: 200,
            eta: 0.0,
            clamp_x0: true,
        }
    }
}

impl SamplerConfig {
    /// Short deterministic rollout without clamping, as used inside training.
    pub fn refinement() -> Self {
        Self {
            num_steps: 10,
            clamp_x0: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > sched.timesteps() {
            return Err(Error::Config(format!(
                "sampler num_steps {} outside 1..={}",
                self.num_steps,
                sched.timesteps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("sampler eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    a.ensure_same_shape(b, what)
}

/// `x_{i−1} = (x_i − (1−α_i)/√(1−ᾱ_i) · ε) / √α_i + σ_i z`.
pub fn ddpm_step(x_i: &Tensor, i: usize, eps_pred: &Tensor, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(i)?;
    check_same(x_i, eps_pred, "ddpm x/eps")?;
    check_same(x_i, z, "ddpm x/z")?;
    let alpha = sched.alpha(i);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(i)).sqrt();
    let sigma = sched.sigma(i);
    let mut out = x_i.clone();
    for ((o, &e), &zz) in out.data_mut().iter_mut().zip(eps_pred.data()).zip(z.data()) {
        *o = inv_sqrt_alpha * (*o - eps_coef * e) + sigma * zz;
    }
    Ok(out)
}

/// Coefficients of the unclamped DDIM update
/// `x_prev = c_x · x_t + c_eps · ε + σ · z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoefficients {
    pub c_x: f64,
    pub c_eps: f64,
    pub sigma: f64,
    /// `√ᾱ_prev` and `√(1−ᾱ_prev−σ²)`, needed when x̂0 is clamped.
    pub sqrt_ab_prev: f64,
    pub dir: f64,
}

pub fn ddim_coefficients(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> Result<DdimCoefficients> {
    sched.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::Input(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let rest = 1.0 - ab_prev - sigma * sigma;
    // at eta = 1 and t_prev = t − 1 the remainder is zero up to rounding
    if rest < -1e-15 {
        return Err(Error::Input(format!(
            "ddim sigma^2 {} exceeds 1 - alpha_bar_prev {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let dir = rest.max(0.0).sqrt();
    let sqrt_ab = ab.sqrt();
    let sqrt_ab_prev = ab_prev.sqrt();
    Ok(DdimCoefficients {
        c_x: sqrt_ab_prev / sqrt_ab,
        c_eps: dir - sqrt_ab_prev * (1.0 - ab).sqrt() / sqrt_ab,
        sigma,
        sqrt_ab_prev,
        dir,
    })
}

/// `x̂0 = (x_t − √(1−ᾱ_t) ε) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_timestep(t)?;
    check_same(x_t, eps_pred, "x0 prediction x/eps")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_pred, |x, e| (x - b * e) / a)
}

#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_pred: &Tensor,
    z: &Tensor,
    eta: f64,
    clamp_x0: bool,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let k = ddim_coefficients(t, t_prev, eta, sched)?;
    check_same(x_t, z, "ddim x/z")?;
    let mut x0 = predict_x0(x_t, t, eps_pred, sched)?;
    if clamp_x0 {
        x0 = x0.map(|v| v.clamp(-1.0, 1.0));
    }
    let mut out = x0;
    for ((o, &e), &zz) in out.data_mut().iter_mut().zip(eps_pred.data()).zip(z.data()) {
        *o = k.sqrt_ab_prev * *o + k.dir * e + k.sigma * zz;
    }
    Ok(out)
}

/// Evenly spaced descending timesteps from `t_start` to 1, both included.
pub fn timestep_subsequence(t_start: usize, num_steps: usize) -> Result<Vec<usize>> {
    if t_start == 0 || num_steps == 0 {
        return Err(Error::Config(format!(
            "subsequence needs t_start >= 1 and num_steps >= 1 (got {t_start}, {num_steps})"
        )));
    }
    let k = num_steps.min(t_start);
    if k == 1 {
        return Ok(vec![t_start]);
    }
    let span = (t_start - 1) as f64;
    Ok((0..k)
        .map(|i| (t_start as f64 - i as f64 * span / (k - 1) as f64).round() as usize)
        .collect())
}

/// Runs the reverse chain with an arbitrary noise predictor
/// `eps_fn(x_t, t)`. Starts from `start = (x, t)` or from N(0, I) at T.
/// Draws come from one generator: the initial noise first (if any), then
/// one `z` per stochastic step.
pub fn sample_with<F>(
    mut eps_fn: F,
    shape: [usize; 4],
    config: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: RngState,
    start: Option<(&Tensor, usize)>,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    config.validate(sched)?;
    let mut gen = rng.generator();
    let (mut x, t_start) = match start {
        Some((x, t)) => {
            sched.check_timestep(t)?;
            if x.shape() != shape {
                return Err(Error::Shape(format!("start {:?} vs mask batch {:?}", x.shape(), shape)));
            }
            (x.clone(), t)
        }
        None => (randn(shape, &mut gen), sched.timesteps()),
    };
    let check = |x: &Tensor, t: usize| {
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("sampler state after the step from t = {t}")))
        }
    };
    match config.kind {
        SamplerKind::Ddpm => {
            for i in (1..=t_start).rev() {
                let eps = eps_fn(&x, i)?;
                let z = if i > 1 { randn(shape, &mut gen) } else { Tensor::zeros(shape) };
                x = ddpm_step(&x, i, &eps, &z, sched)?;
                check(&x, i)?;
            }
        }
        SamplerKind::Ddim => {
            let mut taus = timestep_subsequence(t_start, config.num_steps)?;
            taus.push(0);
            for w in taus.windows(2) {
                let (t, t_prev) = (w[0], w[1]);
                let eps = eps_fn(&x, t)?;
                let k = ddim_coefficients(t, t_prev, config.eta, sched)?;
                let z = if k.sigma > 0.0 { randn(shape, &mut gen) } else { Tensor::zeros(shape) };
                x = ddim_step(&x, t, t_prev, &eps, &z, config.eta, config.clamp_x0, sched)?;
                check(&x, t)?;
            }
        }
    }
    Ok(x)
}

/// Generates images for the masks `c0` with the trained denoiser.
pub fn sample(
    denoiser: &Denoiser,
    params: &ParamVector,
    c0: &Tensor,
    config: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: RngState,
    start: Option<(&Tensor, usize)>,
) -> Result<Tensor> {
    if denoiser.config().max_timestep != sched.timesteps() {
        return Err(Error::Config(format!(
            "denoiser trained for {} timesteps, schedule has {}",
            denoiser.config().max_timestep,
            sched.timesteps()
        )));
    }
    let [n, _, h, w] = c0.shape();
    let shape = [n, denoiser.config().image_channels, h, w];
    sample_with(
        |x, t| denoiser.predict(params, x, &vec![t; n], c0),
        shape,
        config,
        sched,
        rng,
        start,
    )
}
