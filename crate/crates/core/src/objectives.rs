//! Training objectives: the (re-weighted) noise-prediction losses, the
//! IoU + BCE segmentation loss and the refinement loss over the oracle's
//! side outputs.
//!
//! Each loss has a plain evaluation and a `*_with_grad` form returning the
//! derivative with respect to the prediction; the tape wrappers at the bottom
//! use the latter.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::seg_oracle::SegOutputs;
use crate::tensor::Tensor;

pub const DEFAULT_R_CLAMP: f64 = 0.01;
pub const IOU_SMOOTH: f64 = 1.0;
pub const BCE_CLAMP: f64 = 1e-7;

/// Per-pixel loss weights: `1 − r` on foreground, `r` on background.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub weights: Tensor,
    pub ratio: Vec<f64>,
}

impl WeightMap {
    /// All-ones weights, which turn the adaptive loss into the plain one.
    pub fn uniform(shape: [usize; 4], value: f64) -> Self {
        Self {
            weights: Tensor::full(shape, value),
            ratio: vec![value; shape[0]],
        }
    }
}

pub fn validate_mask(mask: &Tensor) -> Result<()> {
    if mask.channels() != 1 {
        return Err(shape_err(format!("mask must have one channel, got {:?}", mask.shape())));
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input(format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

/// Foreground fraction of each item, before clamping.
pub fn polyp_ratio(mask: &Tensor) -> Vec<f64> {
    (0..mask.batch())
        .map(|i| {
            let s = mask.item_slice(i);
            s.iter().filter(|&&v| v == 1.0).count() as f64 / s.len() as f64
        })
        .collect()
}

pub fn weight_map(c0: &Tensor, r_clamp: f64) -> Result<WeightMap> {
    validate_mask(c0)?;
    if !(0.0..0.5).contains(&r_clamp) {
        return Err(Error::Config(format!("r_clamp {r_clamp} outside [0, 0.5)")));
    }
    let ratio: Vec<f64> = polyp_ratio(c0)
        .into_iter()
        .map(|r| r.clamp(r_clamp, 1.0 - r_clamp))
        .collect();
    let mut weights = c0.clone();
    let len = c0.item_len();
    for (item, chunk) in weights.data_mut().chunks_mut(len).enumerate() {
        let r = ratio[item];
        for v in chunk {
            *v = if *v == 1.0 { 1.0 - r } else { r };
        }
    }
    Ok(WeightMap { weights, ratio })
}

fn check_weights(eps: &Tensor, wmap: &WeightMap) -> Result<()> {
    let [n, _, h, w] = eps.shape();
    if wmap.weights.shape() != [n, 1, h, w] {
        return Err(shape_err(format!(
            "weights {:?} for prediction {:?}",
            wmap.weights.shape(),
            eps.shape()
        )));
    }
    Ok(())
}

/// Mean of `w · (ε − ε̂)²` with weights broadcast over channels.
///
/// Summation order is fixed: pixels within a channel, then channels, then
/// batch items.
pub fn adaptive_loss(eps: &Tensor, eps_pred: &Tensor, wmap: &WeightMap) -> Result<f64> {
    eps.ensure_same_shape(eps_pred, "adaptive_loss")?;
    check_weights(eps, wmap)?;
    let [n, c, h, w] = eps.shape();
    let hw = h * w;
    let mut total = 0.0;
    for item in 0..n {
        let wts = &wmap.weights.data()[item * hw..(item + 1) * hw];
        let mut item_sum = 0.0;
        for ch in 0..c {
            let base = (item * c + ch) * hw;
            let e = &eps.data()[base..base + hw];
            let p = &eps_pred.data()[base..base + hw];
            let mut ch_sum = 0.0;
            for k in 0..hw {
                let d = e[k] - p[k];
                ch_sum += wts[k] * d * d;
            }
            item_sum += ch_sum;
        }
        total += item_sum;
    }
    Ok(total / eps.len() as f64)
}

pub fn adaptive_loss_with_grad(eps: &Tensor, eps_pred: &Tensor, wmap: &WeightMap) -> Result<(f64, Tensor)> {
    let value = adaptive_loss(eps, eps_pred, wmap)?;
    let [_, c, h, w] = eps.shape();
    let hw = h * w;
    let scale = -2.0 / eps.len() as f64;
    let mut grad = Tensor::zeros(eps.shape());
    for (k, g) in grad.data_mut().iter_mut().enumerate() {
        let item = k / (c * hw);
        let wt = wmap.weights.data()[item * hw + k % hw];
        *g = scale * wt * (eps.data()[k] - eps_pred.data()[k]);
    }
    Ok((value, grad))
}

/// Plain mean squared noise-prediction error.
pub fn conditional_loss(eps: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    let [n, _, h, w] = eps.shape();
    adaptive_loss(eps, eps_pred, &WeightMap::uniform([n, 1, h, w], 1.0))
}

fn check_probabilities(pred: &Tensor) -> Result<()> {
    if let Some(v) = pred.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Input(format!("probability {v} outside [0, 1]")));
    }
    Ok(())
}

/// Soft IoU loss plus pixel-mean binary cross-entropy.
pub fn seg_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(seg_loss_terms(pred, target)?.0)
}

/// Returns `(total, iou_term, bce_term)`.
pub fn seg_loss_terms(pred: &Tensor, target: &Tensor) -> Result<(f64, f64, f64)> {
    pred.ensure_same_shape(target, "seg_loss")?;
    validate_mask(target)?;
    check_probabilities(pred)?;
    let n = pred.batch();
    let mut iou_term = 0.0;
    for item in 0..n {
        let (inter, union) = soft_overlap(pred.item_slice(item), target.item_slice(item));
        iou_term += 1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH);
    }
    iou_term /= n as f64;
    let bce = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(g * pc.ln() + (1.0 - g) * (1.0 - pc).ln())
        })
        .sum::<f64>()
        / pred.len() as f64;
    Ok((iou_term + bce, iou_term, bce))
}

fn soft_overlap(p: &[f64], g: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
    (inter, total - inter)
}

pub fn seg_loss_with_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let value = seg_loss(pred, target)?;
    let n = pred.batch();
    let len = pred.item_len();
    let total = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    for item in 0..n {
        let p = pred.item_slice(item);
        let g = target.item_slice(item);
        let (inter, union) = soft_overlap(p, g);
        let num = inter + IOU_SMOOTH;
        let den = union + IOU_SMOOTH;
        let dst = &mut grad.data_mut()[item * len..(item + 1) * len];
        for k in 0..len {
            let d_iou = (g[k] * den - num * (1.0 - g[k])) / (den * den);
            let mut d = -d_iou / n as f64;
            if p[k] > BCE_CLAMP && p[k] < 1.0 - BCE_CLAMP {
                d -= (g[k] / p[k] - (1.0 - g[k]) / (1.0 - p[k])) / total;
            }
            dst[k] = d;
        }
    }
    Ok((value, grad))
}

/// `L(c0, c̃_g) + Σ_{i∈{3,4,5}} L(c0, c̃_i)` over full-resolution maps.
pub fn refine_loss(outputs: &SegOutputs, c0: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for map in outputs.full_resolution() {
        total += seg_loss(map, c0)?;
    }
    Ok(total)
}

pub fn total_loss(adaptive: f64, refine: f64) -> Result<f64> {
    if !(adaptive.is_finite() && refine.is_finite()) {
        return Err(Error::NonFinite(format!("adaptive {adaptive}, refine {refine}")));
    }
    Ok(adaptive + refine)
}

/// Adaptive (or, with `wmap = None`, plain) noise loss recorded on a tape.
pub fn tape_noise_loss(tape: &mut Tape, eps_pred: Var, eps: &Tensor, wmap: Option<&WeightMap>) -> Result<Var> {
    let pred = tape.value(eps_pred);
    let [n, _, h, w] = pred.shape();
    let uniform;
    let wmap = match wmap {
        Some(m) => m,
        None => {
            uniform = WeightMap::uniform([n, 1, h, w], 1.0);
            &uniform
        }
    };
    let (value, grad) = adaptive_loss_with_grad(eps, pred, wmap)?;
    tape.scalar_loss(eps_pred, value, grad)
}

pub fn tape_seg_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let (value, grad) = seg_loss_with_grad(tape.value(pred), target)?;
    tape.scalar_loss(pred, value, grad)
}

/// Sum of [`tape_seg_loss`] over the four full-resolution oracle maps.
pub fn tape_refine_loss(tape: &mut Tape, maps: [Var; 4], c0: &Tensor) -> Result<Var> {
    let mut total = tape_seg_loss(tape, maps[0], c0)?;
    for &m in &maps[1..] {
        let l = tape_seg_loss(tape, m, c0)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}
