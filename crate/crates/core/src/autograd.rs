//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its value and the indices of its inputs.
//! [`Tape::backward`] walks the nodes in reverse, skipping any node that no
//! trainable leaf feeds into.

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    GroupNorm { x: Var, inv_std: Vec<f64> },
    UpsampleNearest(Var, usize),
    UpsampleBilinear(Var),
    Concat(Var, Var),
    Select(Var, usize),
    Stack(Vec<Var>),
    /// A scalar whose gradient with respect to `input` was computed eagerly.
    ScalarLoss { input: Var, local_grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a * x + b * y` for constant coefficients.
    pub fn lincomb(&mut self, x: Var, a: f64, y: Var, b: f64) -> Result<Var> {
        let sx = self.scale(x, a);
        let sy = self.scale(y, b);
        self.add(sx, sy)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * kernels::sigmoid(v));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (value, inv_std) = kernels::group_norm(self.value(x), groups)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GroupNorm { x, inv_std }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let value = kernels::upsample_nearest(self.value(x), factor);
        let rg = self.rg(x);
        self.push(value, Op::UpsampleNearest(x, factor), rg)
    }

    pub fn upsample_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = kernels::upsample_bilinear(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(value, Op::UpsampleBilinear(x), rg)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Batch item `i` as a batch of one.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        if i >= self.value(x).batch() {
            return Err(shape_err(format!("select item {i} of {:?}", self.value(x).shape())));
        }
        let value = self.value(x).item(i);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Select(x, i), rg))
    }

    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = items.iter().map(|&v| self.value(v).clone()).collect();
        let value = Tensor::stack(&values)?;
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Stack(items.to_vec()), rg))
    }

    /// Records a scalar `value` whose derivative with respect to `input` is
    /// `local_grad`.
    pub fn scalar_loss(&mut self, input: Var, value: f64, local_grad: Tensor) -> Result<Var> {
        self.value(input).ensure_same_shape(&local_grad, "scalar_loss gradient")?;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { input, local_grad }, rg))
    }

    /// Gradients of the scalar `root` with respect to every node feeding it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", root_value.shape())));
        }
        if !root_value.to_scalar().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", root_value.to_scalar())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += x;
                    }
                }
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))),
                )?;
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, kernels::reduce_to(g, self.value(*a).shape()));
                acc(*b, kernels::reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, kernels::reduce_to(g, self.value(*a).shape()));
                acc(*b, kernels::reduce_to(&g.scale(-1.0), self.value(*b).shape()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = kernels::broadcast_binary(g, self.value(*b), |x, y| x * y)?;
                    acc(*a, kernels::reduce_to(&d, self.value(*a).shape()));
                }
                if self.rg(*b) {
                    let d = kernels::broadcast_binary(g, self.value(*a), |x, y| x * y)?;
                    acc(*b, kernels::reduce_to(&d, self.value(*b).shape()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Silu(a) => {
                let d = self.value(*a).zip_map(g, |x, gy| {
                    let s = kernels::sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                })?;
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = node.value.zip_map(g, |s, gy| gy * s * (1.0 - s))?;
                acc(*a, d);
            }
            Op::GroupNorm { x, inv_std } => {
                acc(*x, kernels::group_norm_backward(&node.value, inv_std, g));
            }
            Op::UpsampleNearest(x, f) => acc(*x, kernels::upsample_nearest_backward(g, *f)),
            Op::UpsampleBilinear(x) => {
                let [_, _, h, w] = self.value(*x).shape();
                acc(*x, kernels::upsample_bilinear_backward(g, h, w));
            }
            Op::Concat(a, b) => {
                let (da, db) = kernels::split_channels(g, self.value(*a).channels());
                acc(*a, da);
                acc(*b, db);
            }
            Op::Select(x, i) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let len = g.len();
                d.data_mut()[i * len..(i + 1) * len].copy_from_slice(g.data());
                acc(*x, d);
            }
            Op::Stack(items) => {
                let mut offset = 0;
                for &v in items {
                    let shape = self.value(v).shape();
                    let len = self.value(v).len();
                    let d = Tensor::from_vec(shape, g.data()[offset..offset + len].to_vec())?;
                    offset += len;
                    acc(v, d);
                }
            }
            Op::ScalarLoss { input, local_grad } => {
                acc(*input, local_grad.scale(g.to_scalar()));
            }
        }
        Ok(())
    }
}
