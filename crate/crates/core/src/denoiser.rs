//! Mask-conditioned noise predictor `ε(x_t, t, c0) = D(E(x_t, t), c0, t)`.
//!
//! The encoder is a convolution stem followed by `levels − 1` stride-2
//! residual blocks with channel doubling. The decoder mirrors it with
//! nearest-neighbour upsampling and skip connections. The conditioning mask
//! only ever enters decoder blocks, either through spatially-adaptive
//! normalization (`Spade`) or as an extra input channel (`Concat`).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::resize_nearest;
use crate::nn::{Conv, GroupNorm};
use crate::objectives::validate_mask;
use crate::params::{BoundParams, LayoutBuilder, ParamLayout, ParamVector};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    Spade,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub cond_mode: CondMode,
    /// Width of the hidden layer mapping the mask to modulation maps.
    pub mask_hidden: usize,
    pub image_channels: usize,
    /// Largest timestep the model accepts.
    pub max_timestep: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            levels: 3,
            time_embed_dim: 64,
            groups: 8,
            cond_mode: CondMode::Spade,
            mask_hidden: 16,
            image_channels: 3,
            max_timestep: 200,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels = {} (need >= 2)", self.levels)));
        }
        if self.groups == 0 || self.base_channels == 0 || self.base_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "base_channels {} not divisible by groups {}",
                self.base_channels, self.groups
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim {} must be even and >= 2",
                self.time_embed_dim
            )));
        }
        if self.mask_hidden == 0 || self.image_channels == 0 || self.max_timestep == 0 {
            return Err(Error::Config("mask_hidden, image_channels and max_timestep must be positive".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial size must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Sinusoidal timestep features, `[n, dim, 1, 1]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::from_vec([ts.len(), dim, 1, 1], data).expect("embedding size")
}

#[derive(Debug, Clone)]
struct EncBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Conv,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Conv,
}

impl EncBlock {
    fn new(lb: &mut LayoutBuilder, cin: usize, cout: usize, cfg: &DenoiserConfig) -> Self {
        Self {
            norm1: GroupNorm::new(lb, "norm1", cin, cfg.groups),
            conv1: Conv::new(lb, "conv1", cin, cout, 3, 2),
            time: Conv::new(lb, "time", cfg.time_embed_dim, cout, 1, 1),
            norm2: GroupNorm::new(lb, "norm2", cout, cfg.groups),
            conv2: Conv::new(lb, "conv2", cout, cout, 3, 1),
            skip: Conv::new(lb, "skip", cin, cout, 1, 2),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h)?;
        let tb = self.time.forward(tape, p, temb)?;
        let h = tape.add(h, tb)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let s = self.skip.forward(tape, p, x)?;
        tape.add(h, s)
    }
}

#[derive(Debug, Clone)]
enum CondNorm {
    /// `gn(x) · (1 + γ(m)) + β(m)` followed by SiLU.
    Spade { mask_conv: Conv, gamma: Conv, beta: Conv, groups: usize },
    /// `silu(gn(x))` with the mask appended as an extra channel.
    Concat { norm: GroupNorm },
}

impl CondNorm {
    fn new(lb: &mut LayoutBuilder, name: &str, channels: usize, cfg: &DenoiserConfig) -> Self {
        lb.push_prefix(name);
        let out = match cfg.cond_mode {
            CondMode::Spade => CondNorm::Spade {
                mask_conv: Conv::new(lb, "mask", 1, cfg.mask_hidden, 3, 1),
                gamma: Conv::new(lb, "gamma", cfg.mask_hidden, channels, 1, 1),
                beta: Conv::new(lb, "beta", cfg.mask_hidden, channels, 1, 1),
                groups: cfg.groups,
            },
            CondMode::Concat => CondNorm::Concat {
                norm: GroupNorm::new(lb, "norm", channels, cfg.groups),
            },
        };
        lb.pop_prefix();
        out
    }

    fn extra_channels(&self) -> usize {
        match self {
            CondNorm::Spade { .. } => 0,
            CondNorm::Concat { .. } => 1,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, mask: Var) -> Result<Var> {
        match self {
            CondNorm::Spade { mask_conv, gamma, beta, groups } => {
                let m = mask_conv.forward(tape, p, mask)?;
                let m = tape.silu(m);
                let g = gamma.forward(tape, p, m)?;
                let b = beta.forward(tape, p, m)?;
                let n = tape.group_norm(x, *groups)?;
                let ng = tape.mul(n, g)?;
                let h = tape.add(n, ng)?;
                let h = tape.add(h, b)?;
                Ok(tape.silu(h))
            }
            CondNorm::Concat { norm } => {
                let h = norm.forward(tape, p, x)?;
                let h = tape.silu(h);
                tape.concat(h, mask)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DecBlock {
    cond1: CondNorm,
    conv1: Conv,
    time: Conv,
    cond2: CondNorm,
    conv2: Conv,
    skip: Conv,
}

impl DecBlock {
    fn new(lb: &mut LayoutBuilder, cin: usize, cout: usize, cfg: &DenoiserConfig) -> Self {
        let cond1 = CondNorm::new(lb, "cond1", cin, cfg);
        let conv1 = Conv::new(lb, "conv1", cin + cond1.extra_channels(), cout, 3, 1);
        let time = Conv::new(lb, "time", cfg.time_embed_dim, cout, 1, 1);
        let cond2 = CondNorm::new(lb, "cond2", cout, cfg);
        let conv2 = Conv::new(lb, "conv2", cout + cond2.extra_channels(), cout, 3, 1);
        let skip = Conv::new(lb, "skip", cin, cout, 1, 1);
        Self {
            cond1,
            conv1,
            time,
            cond2,
            conv2,
            skip,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, temb: Var, mask: Var) -> Result<Var> {
        let h = self.cond1.forward(tape, p, x, mask)?;
        let h = self.conv1.forward(tape, p, h)?;
        let tb = self.time.forward(tape, p, temb)?;
        let h = tape.add(h, tb)?;
        let h = self.cond2.forward(tape, p, h, mask)?;
        let h = self.conv2.forward(tape, p, h)?;
        let s = self.skip.forward(tape, p, x)?;
        tape.add(h, s)
    }
}

/// Encoder activations exposed for conditioning-locality checks.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub features: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: ParamLayout,
    time1: Conv,
    time2: Conv,
    stem: Conv,
    down: Vec<EncBlock>,
    /// Ordered bottom (coarsest) to top.
    up: Vec<DecBlock>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut lb = LayoutBuilder::new();
        let d = cfg.time_embed_dim;
        let time1 = Conv::new(&mut lb, "time_mlp.0", d, d, 1, 1);
        let time2 = Conv::new(&mut lb, "time_mlp.1", d, d, 1, 1);
        let stem = Conv::new(&mut lb, "stem", cfg.image_channels, cfg.channels_at(0), 3, 1);
        let mut down = Vec::new();
        for l in 1..cfg.levels {
            lb.push_prefix(format!("down{l}"));
            down.push(EncBlock::new(&mut lb, cfg.channels_at(l - 1), cfg.channels_at(l), cfg));
            lb.pop_prefix();
        }
        let mut up = Vec::new();
        let bottom = cfg.levels - 1;
        lb.push_prefix("mid");
        up.push(DecBlock::new(&mut lb, cfg.channels_at(bottom), cfg.channels_at(bottom), cfg));
        lb.pop_prefix();
        for l in (0..bottom).rev() {
            lb.push_prefix(format!("up{l}"));
            let cin = cfg.channels_at(l + 1) + cfg.channels_at(l);
            up.push(DecBlock::new(&mut lb, cin, cfg.channels_at(l), cfg));
            lb.pop_prefix();
        }
        let out_norm = GroupNorm::new(&mut lb, "out_norm", cfg.channels_at(0), cfg.groups);
        let out_conv = Conv::zeroed(&mut lb, "out_conv", cfg.channels_at(0), cfg.image_channels, 3, 1);
        Ok(Self {
            config,
            layout: lb.finish(),
            time1,
            time2,
            stem,
            down,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, rng: RngState) -> ParamVector {
        ParamVector::init(&self.layout, rng)
    }

    fn validate_inputs(&self, x: &Tensor, ts: &[usize], c0: &Tensor) -> Result<()> {
        let [n, c, h, w] = x.shape();
        let m = self.config.size_multiple();
        if c != self.config.image_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(shape_err(format!(
                "image {:?} incompatible with {} channels and size multiple {m}",
                x.shape(),
                self.config.image_channels
            )));
        }
        if c0.shape() != [n, 1, h, w] {
            return Err(shape_err(format!("mask {:?} for image {:?}", c0.shape(), x.shape())));
        }
        validate_mask(c0)?;
        if ts.len() != n {
            return Err(shape_err(format!("{} timesteps for batch of {n}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.config.max_timestep) {
            return Err(Error::Timestep {
                t,
                max: self.config.max_timestep,
            });
        }
        Ok(())
    }

    /// Records the noise prediction for `x` on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, ts: &[usize], c0: &Tensor) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x, ts, c0)?.0)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        ts: &[usize],
        c0: &Tensor,
    ) -> Result<(Var, EncoderTrace)> {
        self.validate_inputs(tape.value(x), ts, c0)?;
        let cfg = &self.config;
        let [_, _, h, w] = tape.value(x).shape();

        let temb = tape.constant(timestep_embedding(ts, cfg.time_embed_dim));
        let temb = self.time1.forward(tape, p, temb)?;
        let temb = tape.silu(temb);
        let temb = self.time2.forward(tape, p, temb)?;
        let temb = tape.silu(temb);

        // encoder: mask-free by construction
        let mut feats = vec![self.stem.forward(tape, p, x)?];
        for block in &self.down {
            let prev = *feats.last().expect("stem feature");
            feats.push(block.forward(tape, p, prev, temb)?);
        }
        let trace = EncoderTrace {
            features: feats.clone(),
        };

        let masks: Vec<Var> = (0..cfg.levels)
            .map(|l| tape.constant(resize_nearest(c0, h >> l, w >> l)))
            .collect();
        let bottom = cfg.levels - 1;
        let mut hcur = self.up[0].forward(tape, p, feats[bottom], temb, masks[bottom])?;
        for (block, level) in self.up[1..].iter().zip((0..bottom).rev()) {
            let upsampled = tape.upsample_nearest(hcur, 2);
            let joined = tape.concat(upsampled, feats[level])?;
            hcur = block.forward(tape, p, joined, temb, masks[level])?;
        }
        let out = self.out_norm.forward(tape, p, hcur)?;
        let out = tape.silu(out);
        let out = self.out_conv.forward(tape, p, out)?;
        Ok((out, trace))
    }

    /// Noise prediction without gradient bookkeeping beyond one throwaway tape.
    pub fn predict(&self, params: &ParamVector, x_t: &Tensor, ts: &[usize], c0: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, &bound, x, ts, c0)?;
        Ok(tape.value(out).clone())
    }

    /// Encoder activations for `(x_t, t)` under mask `c0`.
    pub fn encoder_activations(
        &self,
        params: &ParamVector,
        x_t: &Tensor,
        ts: &[usize],
        c0: &Tensor,
    ) -> Result<Vec<Tensor>> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let (_, trace) = self.forward_traced(&mut tape, &bound, x, ts, c0)?;
        Ok(trace.features.iter().map(|&v| tape.value(v).clone()).collect())
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout != self.layout {
            return Err(shape_err("parameter layout does not match denoiser configuration"));
        }
        Ok(())
    }
}
