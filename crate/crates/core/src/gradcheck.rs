//! Central finite-difference checks of the analytic gradients.
//!
//! Each check perturbs one coordinate at a time by `±h` and compares
//! `(f(x+h) − f(x−h)) / 2h` with the tape gradient. Small inputs are checked
//! on every coordinate; parameter vectors on a random subset of at least
//! [`MIN_FRACTION`] of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::denoiser::DenoiserConfig;
use crate::error::Result;
use crate::objectives::{
    adaptive_loss, conditional_loss, refine_loss, seg_loss, tape_noise_loss, tape_refine_loss, tape_seg_loss,
    weight_map,
};
use crate::params::ParamVector;
use crate::rng::{randn, RngState};
use crate::schedule::ScheduleConfig;
use crate::seg_oracle::{SegConfig, SegOracle, SegOutputs};
use crate::synthdata::{gen_item, Dataset, Geometry};
use crate::tensor::Tensor;
use crate::trainer::{Ablation, RefineGradMode, TrainConfig, TrainSetup, Trainer};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-5;
pub const MIN_FRACTION: f64 = 0.01;
/// Inputs with at most this many coordinates are checked exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 1024;
const MIN_SAMPLED: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub coords_total: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub checks: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Coordinates to check: all of them for small inputs, otherwise a random
/// sorted subset of `max(⌈1%⌉, 48)`.
pub fn select_coords(total: usize, rng: RngState) -> Vec<usize> {
    if total <= EXHAUSTIVE_LIMIT {
        return (0..total).collect();
    }
    let n = ((total as f64 * MIN_FRACTION).ceil() as usize).max(MIN_SAMPLED).min(total);
    let mut idx = rand::seq::index::sample(&mut rng.generator(), total, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check_coords<F>(name: &str, x: &[f64], analytic: &[f64], coords: &[usize], mut f: F) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(x.len(), analytic.len(), "{name}: gradient length");
    let mut probe = x.to_vec();
    let mut worst = (0.0, 0);
    for &k in coords {
        probe[k] = x[k] + STEP;
        let up = f(&probe)?;
        probe[k] = x[k] - STEP;
        let down = f(&probe)?;
        probe[k] = x[k];
        let err = rel_err(analytic[k], (up - down) / (2.0 * STEP));
        if err > worst.0 || err.is_nan() {
            worst = (err, k);
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        coords_total: x.len(),
        coords_checked: coords.len(),
        max_rel_err: worst.0,
        worst_coord: worst.1,
        passed: worst.0 <= TOLERANCE,
    })
}

fn with_data(shape: [usize; 4], v: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(shape, v.to_vec())
}

/// Random 0/1 mask with at least one pixel of each class per item.
fn random_mask(shape: [usize; 4], rng: RngState) -> Tensor {
    let mut g = rng.generator();
    let mut m = Tensor::zeros(shape);
    let per = m.item_len();
    for chunk in m.data_mut().chunks_mut(per) {
        for v in chunk.iter_mut() {
            *v = if g.random_bool(0.3) { 1.0 } else { 0.0 };
        }
        chunk[0] = 1.0;
        chunk[per - 1] = 0.0;
    }
    m
}

fn probabilities(shape: [usize; 4], rng: RngState) -> Tensor {
    let mut g = rng.generator();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| g.random_range(0.02..0.98)).collect()).expect("shape")
}

/// Noise losses with respect to the predicted noise.
fn noise_loss_checks(rng: RngState, out: &mut Vec<GradCheck>) -> Result<()> {
    let shape = [2, 3, 8, 8];
    let eps = randn(shape, &mut rng.fork(1).generator());
    let pred = randn(shape, &mut rng.fork(2).generator());
    let c0 = random_mask([2, 1, 8, 8], rng.fork(3));
    let wmap = weight_map(&c0, 0.01)?;
    let coords = select_coords(pred.len(), rng.fork(4));
    for adaptive in [false, true] {
        let mut tape = Tape::new();
        let v = tape.variable(pred.clone());
        let loss = tape_noise_loss(&mut tape, v, &eps, adaptive.then_some(&wmap))?;
        let grads = tape.backward(loss)?;
        let g = grads.get(v).expect("gradient").data().to_vec();
        let name = if adaptive { "adaptive_loss/eps_pred" } else { "condition_loss/eps_pred" };
        out.push(check_coords(name, pred.data(), &g, &coords, |p| {
            let p = with_data(shape, p)?;
            if adaptive {
                adaptive_loss(&eps, &p, &wmap)
            } else {
                conditional_loss(&eps, &p)
            }
        })?);
    }
    Ok(())
}

/// IoU + BCE loss, and its sum over four maps, with respect to the maps.
fn seg_loss_checks(rng: RngState, out: &mut Vec<GradCheck>) -> Result<()> {
    let shape = [2, 1, 8, 8];
    let target = random_mask(shape, rng.fork(1));
    let pred = probabilities(shape, rng.fork(2));
    let mut tape = Tape::new();
    let v = tape.variable(pred.clone());
    let loss = tape_seg_loss(&mut tape, v, &target)?;
    let g = tape.backward(loss)?.get(v).expect("gradient").data().to_vec();
    let coords = select_coords(pred.len(), rng.fork(3));
    out.push(check_coords("seg_loss/pred", pred.data(), &g, &coords, |p| {
        seg_loss(&with_data(shape, p)?, &target)
    })?);

    let maps: Vec<Tensor> = (0..4).map(|i| probabilities(shape, rng.fork(10 + i))).collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = maps.iter().map(|m| tape.variable(m.clone())).collect();
    let loss = tape_refine_loss(&mut tape, [vars[0], vars[1], vars[2], vars[3]], &target)?;
    let grads = tape.backward(loss)?;
    let flat: Vec<f64> = maps.iter().flat_map(|m| m.data().to_vec()).collect();
    let g: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.get(v).expect("gradient").data().to_vec())
        .collect();
    let coords = select_coords(flat.len(), rng.fork(4));
    let per = maps[0].len();
    out.push(check_coords("refine_loss/maps", &flat, &g, &coords, |p| {
        let m = |i: usize| with_data(shape, &p[i * per..(i + 1) * per]);
        let outputs = SegOutputs {
            cg: m(0)?,
            c3: Tensor::zeros([2, 1, 1, 1]),
            c4: Tensor::zeros([2, 1, 1, 1]),
            c5: Tensor::zeros([2, 1, 1, 1]),
            c3_full: m(1)?,
            c4_full: m(2)?,
            c5_full: m(3)?,
        };
        refine_loss(&outputs, &target)
    })?);
    Ok(())
}

/// Refinement loss through the oracle, with respect to the image and to the
/// oracle weights. The oracle needs inputs that are a multiple of 16.
fn oracle_checks(rng: RngState, out: &mut Vec<GradCheck>) -> Result<()> {
    let oracle = SegOracle::new(SegConfig { channels: 4, groups: 2 })?;
    let params = oracle.init_params(rng.fork(1));
    let shape = [1, 3, 16, 16];
    let x = randn(shape, &mut rng.fork(2).generator()).scale(0.5);
    let c0 = random_mask([1, 1, 16, 16], rng.fork(3));

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let xv = tape.variable(x.clone());
    let seg = oracle.forward(&mut tape, &bound, xv)?;
    let loss = tape_refine_loss(&mut tape, seg.full_resolution(), &c0)?;
    let grads = tape.backward(loss)?;
    let gx = grads.get(xv).expect("gradient").data().to_vec();
    let gp = bound.flat_gradient(&params.layout, &grads);

    let coords = select_coords(x.len(), rng.fork(4));
    out.push(check_coords("refine_loss/image_through_oracle", x.data(), &gx, &coords, |p| {
        refine_loss(&oracle.segment(&params, &with_data(shape, p)?)?, &c0)
    })?);
    let coords = select_coords(params.len(), rng.fork(5));
    out.push(check_coords("refine_loss/oracle_params", &params.values, &gp, &coords, |p| {
        let q = ParamVector::from_values(&params.layout, p.to_vec())?;
        refine_loss(&oracle.segment(&q, &x)?, &c0)
    })?);
    Ok(())
}

fn tiny_setup(ablation: Ablation, with_oracle: bool) -> TrainSetup {
    TrainSetup {
        denoiser: DenoiserConfig {
            base_channels: 4,
            levels: 2,
            time_embed_dim: 8,
            groups: 2,
            mask_hidden: 4,
            ..Default::default()
        },
        schedule: ScheduleConfig::default(),
        train: TrainConfig {
            batch_size: 2,
            refine_steps: 2,
            refine_grad_mode: RefineGradMode::Full,
            ema_decay: 0.0,
            checkpoint_every: 0,
            ..Default::default()
        }
        .with_ablation(ablation),
        oracle: with_oracle.then_some(SegConfig { channels: 4, groups: 2 }),
    }
}

/// Whole training objectives with respect to the denoiser parameters:
/// the plain and adaptive noise losses on 8×8 images, and the full
/// objective with a backpropagated refinement rollout on 16×16 images.
fn training_checks(rng: RngState, out: &mut Vec<GradCheck>) -> Result<()> {
    let cases = [
        ("train/condition_loss/denoiser_params", Ablation::None, 8),
        ("train/adaptive_loss/denoiser_params", Ablation::Adaptive, 8),
        ("train/adaptive+refine/denoiser_params", Ablation::Both, 16),
    ];
    for (k, (name, ablation, size)) in cases.into_iter().enumerate() {
        let items = (0..2)
            .map(|i| gen_item(rng.seed ^ 0x5EED, i, Geometry { size }))
            .collect::<Result<Vec<_>>>()?;
        let data = Dataset::from_items(&items)?;
        let refine = ablation.flags().1;
        let trainer = Trainer::new(tiny_setup(ablation, refine), &data)?;
        let oracle = if refine {
            let model = SegOracle::new(SegConfig { channels: 4, groups: 2 })?;
            Some(model.init_params(rng.fork(100 + k as u64)))
        } else {
            None
        };
        // Output conv starts at zero, which hides most of the network.
        let init = trainer.denoiser().init_params(rng.fork(200 + k as u64));
        let mut g = rng.fork(300 + k as u64).generator();
        let values = init.values.iter().map(|v| v + 0.05 * g.random_range(-1.0..1.0)).collect();
        let params = ParamVector::from_values(&init.layout, values)?;
        let (x0, c0) = data.batch(&[0, 1])?;
        let step_rng = rng.fork(400 + k as u64);
        let (_, grad) = trainer.loss_and_gradient(&params, oracle.as_ref(), &x0, &c0, step_rng)?;
        let coords = select_coords(params.len(), rng.fork(500 + k as u64));
        out.push(check_coords(name, &params.values, &grad, &coords, |p| {
            let q = ParamVector::from_values(&params.layout, p.to_vec())?;
            Ok(trainer.loss_and_gradient(&q, oracle.as_ref(), &x0, &c0, step_rng)?.0)
        })?);
    }
    Ok(())
}

/// Runs every suite with randomness derived from `seed`.
pub fn run_all(seed: u64) -> Result<GradCheckReport> {
    let rng = RngState::new(seed);
    let mut checks = Vec::new();
    noise_loss_checks(rng.fork(1), &mut checks)?;
    seg_loss_checks(rng.fork(2), &mut checks)?;
    oracle_checks(rng.fork(3), &mut checks)?;
    training_checks(rng.fork(4), &mut checks)?;
    Ok(GradCheckReport {
        step: STEP,
        tolerance: TOLERANCE,
        seed,
        checks,
    })
}
