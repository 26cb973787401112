//! Small multi-scale segmentation network used as a frozen mask predictor.
//!
//! A shared stride-2 encoder produces features at 1/2, 1/4, 1/8 and 1/16 of
//! the input size. 1×1 heads on the last three give the side outputs
//! `c3`, `c4`, `c5`; a top-down lateral fusion down to 1/2 resolution gives
//! the global map `cg`. All maps are brought to full resolution with
//! bilinear interpolation before the sigmoid.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv, GroupNorm};
use crate::optim::{optimizer_update, AdamConfig, Moments};
use crate::params::{loss_gradient, BoundParams, LayoutBuilder, ParamLayout, ParamVector};
use crate::rng::RngState;
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

/// Interpolation used to bring side outputs to full resolution.
pub const UPSAMPLING: &str = "bilinear";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub channels: usize,
    pub groups: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { channels: 16, groups: 4 }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "oracle channels {} must be a positive multiple of groups {}",
                self.channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Probability maps in (0, 1). Side outputs are kept at their native
/// strides (4, 8, 16) and also upsampled to the input size.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutputs {
    pub cg: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
    pub c5: Tensor,
    pub c3_full: Tensor,
    pub c4_full: Tensor,
    pub c5_full: Tensor,
}

impl SegOutputs {
    /// `[cg, c3, c4, c5]` at input resolution.
    pub fn full_resolution(&self) -> [&Tensor; 4] {
        [&self.cg, &self.c3_full, &self.c4_full, &self.c5_full]
    }
}

/// Tape handles for the oracle outputs.
#[derive(Debug, Clone, Copy)]
pub struct SegVars {
    pub cg: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
    pub c3_full: Var,
    pub c4_full: Var,
    pub c5_full: Var,
}

impl SegVars {
    pub fn full_resolution(&self) -> [Var; 4] {
        [self.cg, self.c3_full, self.c4_full, self.c5_full]
    }

    pub fn values(&self, tape: &Tape) -> SegOutputs {
        let v = |x: Var| tape.value(x).clone();
        SegOutputs {
            cg: v(self.cg),
            c3: v(self.c3),
            c4: v(self.c4),
            c5: v(self.c5),
            c3_full: v(self.c3_full),
            c4_full: v(self.c4_full),
            c5_full: v(self.c5_full),
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv,
    norm1: GroupNorm,
    conv: Conv,
    norm2: GroupNorm,
}

impl Stage {
    fn new(lb: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        lb.push_prefix(name);
        let s = Self {
            down: Conv::new(lb, "down", cin, cout, 3, 2),
            norm1: GroupNorm::new(lb, "norm1", cout, groups),
            conv: Conv::new(lb, "conv", cout, cout, 3, 1),
            norm2: GroupNorm::new(lb, "norm2", cout, groups),
        };
        lb.pop_prefix();
        s
    }

    fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, p, x)?;
        let h = self.norm1.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.conv.forward(tape, p, h)?;
        let h = self.norm2.forward(tape, p, h)?;
        Ok(tape.silu(h))
    }
}

#[derive(Debug, Clone)]
pub struct SegOracle {
    config: SegConfig,
    layout: ParamLayout,
    stem: Conv,
    stem_norm: GroupNorm,
    stages: [Stage; 3],
    heads: [Conv; 3],
    laterals: [Conv; 4],
    fuse_norm: GroupNorm,
    fuse_out: Conv,
}

impl SegOracle {
    pub fn new(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let g = config.groups;
        let widths = [c, c, 2 * c, 2 * c];
        let mut lb = LayoutBuilder::new();
        let stem = Conv::new(&mut lb, "stem", 3, c, 3, 2);
        let stem_norm = GroupNorm::new(&mut lb, "stem_norm", c, g);
        let stages = [
            Stage::new(&mut lb, "stage1", widths[0], widths[1], g),
            Stage::new(&mut lb, "stage2", widths[1], widths[2], g),
            Stage::new(&mut lb, "stage3", widths[2], widths[3], g),
        ];
        let heads = [
            Conv::new(&mut lb, "head3", widths[1], 1, 1, 1),
            Conv::new(&mut lb, "head4", widths[2], 1, 1, 1),
            Conv::new(&mut lb, "head5", widths[3], 1, 1, 1),
        ];
        let laterals = [
            Conv::new(&mut lb, "lateral0", widths[0], c, 1, 1),
            Conv::new(&mut lb, "lateral1", widths[1], c, 1, 1),
            Conv::new(&mut lb, "lateral2", widths[2], c, 1, 1),
            Conv::new(&mut lb, "lateral3", widths[3], c, 1, 1),
        ];
        let fuse_norm = GroupNorm::new(&mut lb, "fuse_norm", c, g);
        let fuse_out = Conv::new(&mut lb, "fuse_out", c, 1, 3, 1);
        Ok(Self {
            config,
            layout: lb.finish(),
            stem,
            stem_norm,
            stages,
            heads,
            laterals,
            fuse_norm,
            fuse_out,
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, rng: RngState) -> ParamVector {
        ParamVector::init(&self.layout, rng)
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout != self.layout {
            return Err(shape_err("oracle parameters do not match the oracle layout"));
        }
        Ok(())
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 3 || h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(shape_err(format!(
                "oracle input must be [N, 3, H, W] with H, W positive multiples of 16, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the oracle on `tape`. Gradients flow to `x` whenever it requires them.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<SegVars> {
        Self::check_input(tape.value(x))?;
        let [_, _, h, w] = tape.value(x).shape();
        let f0 = self.stem.forward(tape, p, x)?;
        let f0 = self.stem_norm.forward(tape, p, f0)?;
        let f0 = tape.silu(f0);
        let f1 = self.stages[0].forward(tape, p, f0)?;
        let f2 = self.stages[1].forward(tape, p, f1)?;
        let f3 = self.stages[2].forward(tape, p, f2)?;

        let mut side = Vec::with_capacity(6);
        for (head, f) in self.heads.iter().zip([f1, f2, f3]) {
            let logit = head.forward(tape, p, f)?;
            let native = tape.sigmoid(logit);
            let up = tape.upsample_bilinear(logit, h, w);
            side.push((native, tape.sigmoid(up)));
        }

        let mut top = self.laterals[3].forward(tape, p, f3)?;
        for (lat, f) in self.laterals[..3].iter().zip([f0, f1, f2]).rev() {
            let up = tape.upsample_nearest(top, 2);
            let l = lat.forward(tape, p, f)?;
            top = tape.add(up, l)?;
        }
        let fused = self.fuse_norm.forward(tape, p, top)?;
        let fused = tape.silu(fused);
        let logit = self.fuse_out.forward(tape, p, fused)?;
        let up = tape.upsample_bilinear(logit, h, w);
        let cg = tape.sigmoid(up);

        Ok(SegVars {
            cg,
            c3: side[0].0,
            c4: side[1].0,
            c5: side[2].0,
            c3_full: side[0].1,
            c4_full: side[1].1,
            c5_full: side[2].1,
        })
    }

    pub fn segment(&self, params: &ParamVector, x: &Tensor) -> Result<SegOutputs> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        Ok(self.forward(&mut tape, &p, xv)?.values(&tape))
    }
}

/// Deep-supervision loss: seg_loss summed over `cg`, `c3`, `c4`, `c5` at full resolution.
pub fn deep_supervision_loss(tape: &mut Tape, out: &SegVars, target: &Tensor) -> Result<Var> {
    crate::objectives::tape_refine_loss(tape, out.full_resolution(), target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub model: SegConfig,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            model: SegConfig::default(),
            epochs: 30,
            max_steps: 0,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub params: ParamVector,
    /// Training loss of every optimizer step, in order.
    pub losses: Vec<f64>,
}

/// Trains from scratch with epoch-wise shuffled mini-batches.
pub fn train_oracle(data: &Dataset, config: &SegTrainConfig, rng: RngState) -> Result<OracleRun> {
    if data.is_empty() {
        return Err(Error::Input("cannot train the oracle on an empty dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("oracle batch size must be positive".into()));
    }
    config.adam.validate()?;
    let oracle = SegOracle::new(config.model)?;
    let mut params = oracle.init_params(rng.fork(0));
    let mut moments = Moments::zeros(params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    'epochs: for epoch in 0..config.epochs {
        let mut shuffle = rng.fork(1 + epoch as u64).generator();
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps > 0 && losses.len() >= config.max_steps {
                break 'epochs;
            }
            let (x, c0) = data.batch(chunk)?;
            let (loss, grad) = loss_gradient(&params, |tape, p| {
                let xv = tape.constant(x.clone());
                let out = oracle.forward(tape, p, xv)?;
                deep_supervision_loss(tape, &out, &c0)
            })?;
            let (next, m) = optimizer_update(&params.values, &grad, &moments, &config.adam)?;
            params.values = next;
            moments = m;
            losses.push(loss);
        }
    }
    Ok(OracleRun { params, losses })
}

/// Config stored with oracle checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckpointConfig {
    pub model: SegConfig,
    pub upsampling: String,
    pub train: SegTrainConfig,
}

pub fn save_oracle(path: &Path, train: &SegTrainConfig, params: &ParamVector) -> Result<()> {
    let config = OracleCheckpointConfig {
        model: train.model,
        upsampling: UPSAMPLING.to_string(),
        train: train.clone(),
    };
    Checkpoint::new(CheckpointKind::Oracle, &config)?
        .with_section("params", params.values.clone())
        .save(path)
}

pub fn load_oracle(path: &Path) -> Result<(SegOracle, ParamVector)> {
    let ck = Checkpoint::load_kind(path, CheckpointKind::Oracle)?;
    let config: OracleCheckpointConfig = ck.config()?;
    if config.upsampling != UPSAMPLING {
        return Err(Error::Checkpoint(format!("unsupported upsampling {:?}", config.upsampling)));
    }
    let oracle = SegOracle::new(config.model)?;
    let params = ParamVector::from_values(oracle.layout(), ck.section("params")?.to_vec())?;
    Ok((oracle, params))
}
