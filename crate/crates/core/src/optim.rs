//! Adaptive-moment optimizer and parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub count: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            count: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn optimizer_update(
    params: &[f64],
    grads: &[f64],
    moments: &Moments,
    hyper: &AdamConfig,
) -> Result<(Vec<f64>, Moments)> {
    if params.len() != grads.len() || params.len() != moments.first.len() || params.len() != moments.second.len() {
        return Err(shape_err(format!(
            "optimizer lengths: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            moments.first.len(),
            moments.second.len()
        )));
    }
    let count = moments.count + 1;
    let bc1 = 1.0 - hyper.beta1.powi(count as i32);
    let bc2 = 1.0 - hyper.beta2.powi(count as i32);
    let mut out = Vec::with_capacity(params.len());
    let mut first = Vec::with_capacity(params.len());
    let mut second = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g = grads[i];
        let m = hyper.beta1 * moments.first[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * moments.second[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        out.push(params[i] - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps));
        first.push(m);
        second.push(v);
    }
    Ok((out, Moments { first, second, count }))
}

/// `decay · ema + (1 − decay) · params`.
pub fn ema_update(ema: &[f64], params: &[f64], decay: f64) -> Result<Vec<f64>> {
    if ema.len() != params.len() {
        return Err(shape_err(format!("ema length {} vs params {}", ema.len(), params.len())));
    }
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
    }
    Ok(ema
        .iter()
        .zip(params)
        .map(|(e, p)| decay * e + (1.0 - decay) * p)
        .collect())
}
