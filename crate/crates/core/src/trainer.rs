//! Training loop for the mask-conditioned denoiser.
//!
//! One iteration: draw `t` and `ε`, noise the batch, predict `ε`, and score
//! it with the (adaptive or plain) noise loss. With refinement on, the
//! one-shot estimate `x̃_t = √ᾱ_t x0 + √(1−ᾱ_t) ε_θ(x_t)` is rolled back to
//! `x̃_0` with deterministic DDIM steps, segmented by the frozen oracle and
//! scored against the conditioning mask. The summed loss drives one Adam
//! step followed by an EMA update.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::objectives::{polyp_ratio, tape_noise_loss, tape_refine_loss, weight_map, DEFAULT_R_CLAMP};
use crate::optim::{ema_update, optimizer_update, AdamConfig, Moments};
use crate::params::{BoundParams, ParamVector};
use crate::rng::{randn, RngState};
use crate::sampler::{ddim_coefficients, timestep_subsequence};
use crate::schedule::{q_sample_batch, NoiseSchedule, ScheduleConfig};
use crate::seg_oracle::{SegConfig, SegOracle};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

/// Labels of the per-step random streams forked from `state.rng.fork(step)`.
pub const STREAM_BATCH: u64 = 1;
pub const STREAM_T: u64 = 2;
pub const STREAM_EPS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineGradMode {
    /// Differentiate through every denoiser call of the rollout.
    Full,
    /// Only the initial `x̃_t` carries gradient; later calls are constants.
    FirstStepOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub use_adaptive: bool,
    pub use_refine: bool,
    pub refine_grad_mode: RefineGradMode,
    pub refine_steps: usize,
    /// Multiplier on the refinement term; 1 is the unweighted sum.
    pub refine_weight: f64,
    /// First step at which the refinement term is active.
    pub refine_start: u64,
    pub ema_decay: f64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub r_clamp: f64,
    /// Draw one timestep per item (true) or one per batch (false).
    pub per_item_t: bool,
    /// Update the oracle together with the denoiser.
    pub finetune_oracle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 5000,
            adam: AdamConfig::default(),
            use_adaptive: true,
            use_refine: true,
            refine_grad_mode: RefineGradMode::Full,
            refine_steps: 10,
            refine_weight: 1.0,
            refine_start: 0,
            ema_decay: 0.999,
            checkpoint_every: 1000,
            seed: 0,
            r_clamp: DEFAULT_R_CLAMP,
            per_item_t: true,
            finetune_oracle: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    Adaptive,
    Refine,
    Both,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::None, Self::Adaptive, Self::Refine, Self::Both];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::None => (false, false),
            Self::Adaptive => (true, false),
            Self::Refine => (false, true),
            Self::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Adaptive => "adaptive",
            Self::Refine => "refine",
            Self::Both => "both",
        }
    }
}

impl TrainConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        (self.use_adaptive, self.use_refine) = a.flags();
        self
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.refine_steps == 0 || self.refine_steps > timesteps {
            return Err(Error::Config(format!(
                "refine_steps {} outside 1..={timesteps}",
                self.refine_steps
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.refine_weight.is_finite() && self.refine_weight >= 0.0) {
            return Err(Error::Config(format!("refine_weight {}", self.refine_weight)));
        }
        if !(0.0..0.5).contains(&self.r_clamp) {
            return Err(Error::Config(format!("r_clamp {} outside [0, 0.5)", self.r_clamp)));
        }
        Ok(())
    }
}

/// Everything that determines a training run; its JSON digest is stored
/// in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSetup {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub oracle: Option<SegConfig>,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            oracle: Some(SegConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamVector,
    pub ema: Vec<f64>,
    pub moments: Moments,
    pub rng: RngState,
    pub oracle: Option<ParamVector>,
    pub oracle_moments: Option<Moments>,
}

impl TrainState {
    pub fn ema_params(&self) -> ParamVector {
        ParamVector {
            values: self.ema.clone(),
            layout: self.params.layout.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// `"adaptive"` or `"condition"`.
    pub noise_loss_kind: String,
    pub loss_noise: f64,
    pub loss_refine: Option<f64>,
    pub loss_total: f64,
    pub t: Vec<usize>,
    pub r: Vec<f64>,
    pub grad_norm: f64,
}

struct LossGraph {
    total: Var,
    noise: Var,
    refine: Option<Var>,
    bound: BoundParams,
    oracle_bound: Option<BoundParams>,
    ts: Vec<usize>,
}

pub struct Trainer<'a> {
    setup: TrainSetup,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    oracle: Option<SegOracle>,
    data: &'a Dataset,
}

impl<'a> Trainer<'a> {
    pub fn new(setup: TrainSetup, data: &'a Dataset) -> Result<Self> {
        let sched = NoiseSchedule::from_config(&setup.schedule)?;
        setup.train.validate(sched.timesteps())?;
        if setup.denoiser.max_timestep != sched.timesteps() {
            return Err(Error::Config(format!(
                "denoiser max_timestep {} differs from schedule length {}",
                setup.denoiser.max_timestep,
                sched.timesteps()
            )));
        }
        let denoiser = Denoiser::new(setup.denoiser.clone())?;
        let oracle = match (setup.train.use_refine, setup.oracle) {
            (true, None) => return Err(Error::Config("refinement needs an oracle config".into())),
            (true, Some(c)) => Some(SegOracle::new(c)?),
            (false, _) => None,
        };
        Ok(Self {
            setup,
            denoiser,
            sched,
            oracle,
            data,
        })
    }

    pub fn setup(&self) -> &TrainSetup {
        &self.setup
    }

    pub fn config(&self) -> &TrainConfig {
        &self.setup.train
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Fresh state; `oracle` must be given exactly when refinement is on.
    pub fn init_state(&self, oracle: Option<ParamVector>) -> Result<TrainState> {
        let base = RngState::new(self.config().seed);
        let params = self.denoiser.init_params(base.fork(0));
        let oracle = match (&self.oracle, oracle) {
            (Some(model), Some(p)) => {
                model.check_params(&p)?;
                Some(p)
            }
            (Some(_), None) => return Err(Error::Config("refinement needs trained oracle parameters".into())),
            (None, _) => None,
        };
        let oracle_moments = match (&oracle, self.config().finetune_oracle) {
            (Some(p), true) => Some(Moments::zeros(p.len())),
            _ => None,
        };
        Ok(TrainState {
            step: 0,
            ema: params.values.clone(),
            moments: Moments::zeros(params.len()),
            params,
            rng: base.fork(1),
            oracle,
            oracle_moments,
        })
    }

    /// One optimizer step on the batch drawn for `state.step`.
    pub fn step(&self, state: &TrainState) -> Result<(TrainState, StepMetrics)> {
        if self.data.is_empty() {
            return Err(Error::Input("training dataset is empty".into()));
        }
        let rng = state.rng.fork(state.step);
        let n = self.config().batch_size;
        let mut g = rng.fork(STREAM_BATCH).generator();
        let indices: Vec<usize> = if n <= self.data.len() {
            rand::seq::index::sample(&mut g, self.data.len(), n).into_vec()
        } else {
            (0..n).map(|_| g.random_range(0..self.data.len())).collect()
        };
        let (x0, c0) = self.data.batch(&indices)?;
        self.train_step(state, &x0, &c0, rng)
    }

    /// Records the training loss of one batch on `tape`.
    fn build_loss(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        oracle: Option<&ParamVector>,
        x0: &Tensor,
        c0: &Tensor,
        rng: RngState,
        refine: bool,
    ) -> Result<LossGraph> {
        let cfg = self.config();
        let n = x0.batch();
        let t_max = self.sched.timesteps();
        let mut g = rng.fork(STREAM_T).generator();
        let ts: Vec<usize> = if cfg.per_item_t {
            (0..n).map(|_| g.random_range(1..=t_max)).collect()
        } else {
            vec![g.random_range(1..=t_max); n]
        };
        let eps_rng = rng.fork(STREAM_EPS);
        let item_shape = [1, x0.channels(), x0.height(), x0.width()];
        let eps_items: Vec<Tensor> = (0..n)
            .map(|i| randn(item_shape, &mut eps_rng.fork(i as u64).generator()))
            .collect();
        let eps = Tensor::stack(&eps_items)?;
        let x_t = q_sample_batch(x0, &ts, &eps, &self.sched)?;
        let wmap = if cfg.use_adaptive {
            Some(weight_map(c0, cfg.r_clamp)?)
        } else {
            None
        };

        let bound = params.bind(tape, true);
        let xt_var = tape.constant(x_t);
        let eps_pred = self.denoiser.forward(tape, &bound, xt_var, &ts, c0)?;
        let noise = tape_noise_loss(tape, eps_pred, &eps, wmap.as_ref())?;

        let mut graph = LossGraph {
            total: noise,
            noise,
            refine: None,
            bound,
            oracle_bound: None,
            ts,
        };
        if let (Some(model), Some(op), true) = (&self.oracle, oracle, cfg.use_refine && refine) {
            let ob = op.bind(tape, cfg.finetune_oracle);
            let x_tilde = self.one_shot_estimate(tape, x0, eps_pred, &graph.ts)?;
            let x0_tilde = self.rollout(tape, &graph.bound, params, x_tilde, &graph.ts, c0)?;
            let seg = model.forward(tape, &ob, x0_tilde)?;
            let l_ref = tape_refine_loss(tape, seg.full_resolution(), c0)?;
            graph.total = tape.lincomb(noise, 1.0, l_ref, cfg.refine_weight)?;
            graph.refine = Some(l_ref);
            graph.oracle_bound = Some(ob);
        }
        Ok(graph)
    }

    /// Training loss of one batch and its gradient with respect to the
    /// denoiser parameters, without an optimizer update.
    pub fn loss_and_gradient(
        &self,
        params: &ParamVector,
        oracle: Option<&ParamVector>,
        x0: &Tensor,
        c0: &Tensor,
        rng: RngState,
    ) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let graph = self.build_loss(&mut tape, params, oracle, x0, c0, rng, true)?;
        let value = tape.value(graph.total).to_scalar();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        let grads = tape.backward(graph.total)?;
        Ok((value, graph.bound.flat_gradient(&params.layout, &grads)))
    }

    /// One optimizer step on an explicit batch with randomness from `rng`.
    pub fn train_step(&self, state: &TrainState, x0: &Tensor, c0: &Tensor, rng: RngState) -> Result<(TrainState, StepMetrics)> {
        let cfg = self.config();
        let mut tape = Tape::new();
        let LossGraph {
            total,
            noise: l_noise,
            refine: l_refine,
            bound,
            oracle_bound,
            ts,
        } = self.build_loss(
            &mut tape,
            &state.params,
            state.oracle.as_ref(),
            x0,
            c0,
            rng,
            state.step >= cfg.refine_start,
        )?;

        let loss_total = tape.value(total).to_scalar();
        let loss_noise = tape.value(l_noise).to_scalar();
        let loss_refine = l_refine.map(|v| tape.value(v).to_scalar());
        if !loss_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {} (noise {loss_noise}, refine {loss_refine:?})",
                state.step
            )));
        }
        let grads = tape.backward(total)?;
        let flat = bound.flat_gradient(&state.params.layout, &grads);
        let grad_norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        let (values, moments) = optimizer_update(&state.params.values, &flat, &state.moments, &cfg.adam)?;
        let ema = ema_update(&state.ema, &values, cfg.ema_decay)?;

        let mut next = TrainState {
            step: state.step + 1,
            params: ParamVector {
                values,
                layout: state.params.layout.clone(),
            },
            ema,
            moments,
            rng: state.rng,
            oracle: state.oracle.clone(),
            oracle_moments: state.oracle_moments.clone(),
        };
        if let (Some(ob), Some(op), Some(om)) = (&oracle_bound, &state.oracle, &state.oracle_moments) {
            let og = ob.flat_gradient(&op.layout, &grads);
            let (ov, om) = optimizer_update(&op.values, &og, om, &cfg.adam)?;
            next.oracle = Some(ParamVector {
                values: ov,
                layout: op.layout.clone(),
            });
            next.oracle_moments = Some(om);
        }
        let metrics = StepMetrics {
            step: next.step,
            noise_loss_kind: if cfg.use_adaptive { "adaptive" } else { "condition" }.to_string(),
            loss_noise,
            loss_refine,
            loss_total,
            t: ts,
            r: polyp_ratio(c0),
            grad_norm,
        };
        Ok((next, metrics))
    }

    /// `√ᾱ_t x0 + √(1−ᾱ_t) ε_θ` with per-item coefficients.
    fn one_shot_estimate(&self, tape: &mut Tape, x0: &Tensor, eps_pred: Var, ts: &[usize]) -> Result<Var> {
        let n = ts.len();
        let a: Vec<f64> = ts.iter().map(|&t| self.sched.alpha_bar(t).sqrt()).collect();
        let b: Vec<f64> = ts.iter().map(|&t| (1.0 - self.sched.alpha_bar(t)).sqrt()).collect();
        let mut scaled = x0.clone();
        let per = x0.item_len();
        for (i, chunk) in scaled.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= a[i]);
        }
        let ax0 = tape.constant(scaled);
        let bt = tape.constant(Tensor::from_vec([n, 1, 1, 1], b)?);
        let be = tape.mul(eps_pred, bt)?;
        tape.add(ax0, be)
    }

    /// Deterministic DDIM rollout from per-item `(x̃_t, t)` down to `x̃_0`.
    /// Items still active at the same rollout index share one denoiser call.
    fn rollout(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        params: &ParamVector,
        x_tilde: Var,
        ts: &[usize],
        c0: &Tensor,
    ) -> Result<Var> {
        let cfg = self.config();
        let n = ts.len();
        let seqs = ts
            .iter()
            .map(|&t| {
                let mut s = timestep_subsequence(t, cfg.refine_steps)?;
                s.push(0);
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut states = (0..n).map(|i| tape.select(x_tilde, i)).collect::<Result<Vec<_>>>()?;
        let masks: Vec<Tensor> = (0..n).map(|i| c0.item(i)).collect();
        let longest = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(0);
        for k in 0..longest {
            let active: Vec<usize> = (0..n).filter(|&i| k + 1 < seqs[i].len()).collect();
            let ts_k: Vec<usize> = active.iter().map(|&i| seqs[i][k]).collect();
            let mask_k = Tensor::stack(&active.iter().map(|&i| masks[i].clone()).collect::<Vec<_>>())?;
            let eps_k = match cfg.refine_grad_mode {
                RefineGradMode::Full => {
                    let xs = tape.stack(&active.iter().map(|&i| states[i]).collect::<Vec<_>>())?;
                    self.denoiser.forward(tape, bound, xs, &ts_k, &mask_k)?
                }
                RefineGradMode::FirstStepOnly => {
                    let xs: Vec<Tensor> = active.iter().map(|&i| tape.value(states[i]).clone()).collect();
                    let e = self.denoiser.predict(params, &Tensor::stack(&xs)?, &ts_k, &mask_k)?;
                    tape.constant(e)
                }
            };
            for (j, &i) in active.iter().enumerate() {
                let coef = ddim_coefficients(seqs[i][k], seqs[i][k + 1], 0.0, &self.sched)?;
                let e = tape.select(eps_k, j)?;
                states[i] = tape.lincomb(states[i], coef.c_x, e, coef.c_eps)?;
            }
        }
        tape.stack(&states)
    }

    pub fn to_checkpoint(&self, state: &TrainState) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CheckpointKind::Denoiser, &self.setup)?
            .with_section("params", state.params.values.clone())
            .with_section("ema", state.ema.clone())
            .with_section("adam.first", state.moments.first.clone())
            .with_section("adam.second", state.moments.second.clone());
        if let Some(op) = &state.oracle {
            ck = ck.with_section("oracle.params", op.values.clone());
        }
        if let Some(om) = &state.oracle_moments {
            ck = ck
                .with_section("oracle.adam.first", om.first.clone())
                .with_section("oracle.adam.second", om.second.clone());
        }
        ck.step = state.step;
        ck.rng = state.rng;
        ck.adam_count = state.moments.count;
        Ok(ck)
    }

    pub fn state_from_checkpoint(&self, ck: &Checkpoint) -> Result<TrainState> {
        if ck.kind != CheckpointKind::Denoiser {
            return Err(Error::Checkpoint("expected a denoiser checkpoint".into()));
        }
        ck.verify_config(&self.setup)?;
        let layout = self.denoiser.layout();
        let params = ParamVector::from_values(layout, ck.section("params")?.to_vec())?;
        let moments = Moments {
            first: ck.section("adam.first")?.to_vec(),
            second: ck.section("adam.second")?.to_vec(),
            count: ck.adam_count,
        };
        let oracle = match &self.oracle {
            Some(model) => Some(ParamVector::from_values(model.layout(), ck.section("oracle.params")?.to_vec())?),
            None => None,
        };
        let oracle_moments = if ck.has_section("oracle.adam.first") {
            Some(Moments {
                first: ck.section("oracle.adam.first")?.to_vec(),
                second: ck.section("oracle.adam.second")?.to_vec(),
                count: ck.adam_count,
            })
        } else {
            None
        };
        Ok(TrainState {
            step: ck.step,
            ema: ck.section("ema")?.to_vec(),
            params,
            moments,
            rng: ck.rng,
            oracle,
            oracle_moments,
        })
    }

    /// Trains until `state.step == until`. With `out`, appends one metrics
    /// line per step to `out/metrics.jsonl`, writes periodic checkpoints
    /// and `out/final.ckpt`.
    pub fn run(&self, mut state: TrainState, until: u64, out: Option<&Path>) -> Result<TrainState> {
        let mut metrics_file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        let mut last_good: Option<PathBuf> = None;
        while state.step < until {
            let (next, metrics) = match self.step(&state) {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    let pointer = last_good
                        .as_ref()
                        .map_or("none saved yet".to_string(), |p| p.display().to_string());
                    return Err(Error::NonFinite(format!("{msg}; last good checkpoint: {pointer}")));
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&metrics)?)?;
            }
            state = next;
            let every = self.config().checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && state.step % every == 0 {
                    let path = dir.join(format!("step_{:06}.ckpt", state.step));
                    self.to_checkpoint(&state)?.save(&path)?;
                    last_good = Some(path);
                }
            }
        }
        if let Some(dir) = out {
            self.to_checkpoint(&state)?.save(&dir.join("final.ckpt"))?;
        }
        Ok(state)
    }
}

/// Loads EMA weights and the denoiser from a training checkpoint.
pub fn load_denoiser(path: &Path) -> Result<(TrainSetup, Denoiser, ParamVector)> {
    let ck = Checkpoint::load_kind(path, CheckpointKind::Denoiser)?;
    let setup: TrainSetup = ck.config()?;
    let denoiser = Denoiser::new(setup.denoiser.clone())?;
    let ema = ParamVector::from_values(denoiser.layout(), ck.section("ema")?.to_vec())?;
    Ok((setup, denoiser, ema))
}
