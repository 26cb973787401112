//! Small layer descriptors shared by the denoiser and the segmentation oracle.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{BlockId, BoundParams, Init, LayoutBuilder};

#[derive(Debug, Clone)]
pub struct Conv {
    w: BlockId,
    b: BlockId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(lb: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan_in = cin * k * k;
        Self::with_init(lb, name, cin, cout, k, stride, Init::FanInUniform { fan_in })
    }

    pub fn zeroed(lb: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_init(lb, name, cin, cout, k, stride, Init::Zeros)
    }

    fn with_init(
        lb: &mut LayoutBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        lb.push_prefix(name);
        let w = lb.add("weight", [cout, cin, k, k], init);
        let b = lb.add("bias", [1, cout, 1, 1], init);
        lb.pop_prefix();
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// Group normalization with a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    scale: BlockId,
    shift: BlockId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(lb: &mut LayoutBuilder, name: &str, channels: usize, groups: usize) -> Self {
        lb.push_prefix(name);
        let scale = lb.add("scale", [1, channels, 1, 1], Init::Ones);
        let shift = lb.add("shift", [1, channels, 1, 1], Init::Zeros);
        lb.pop_prefix();
        Self { scale, shift, groups }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let n = tape.group_norm(x, self.groups)?;
        let s = tape.mul(n, p.var(self.scale))?;
        tape.add(s, p.var(self.shift))
    }
}
