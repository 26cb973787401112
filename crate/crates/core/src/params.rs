//! Flat parameter vectors with a named block layout.
//!
//! Models declare their blocks through a [`LayoutBuilder`] at construction
//! time and keep the returned [`BlockId`]s. The flat vector is what the
//! optimizer, EMA and checkpoint code see; the tape sees one leaf per block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: usize,
    pub init: Init,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(usize);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    total: usize,
}

impl ParamLayout {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: ParamLayout,
    prefix: Vec<String>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_prefix(&mut self, p: impl Into<String>) {
        self.prefix.push(p.into());
    }

    pub fn pop_prefix(&mut self) {
        self.prefix.pop();
    }

    pub fn add(&mut self, name: &str, shape: [usize; 4], init: Init) -> BlockId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix.join("."))
        };
        let offset = self.layout.total;
        self.layout.blocks.push(Block {
            name: full,
            shape,
            offset,
            init,
        });
        self.layout.total += shape.iter().product::<usize>();
        BlockId(self.layout.blocks.len() - 1)
    }

    pub fn finish(self) -> ParamLayout {
        self.layout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.total_len()],
            layout: layout.clone(),
        }
    }

    pub fn from_values(layout: &ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(shape_err(format!(
                "parameter vector of length {} for layout of {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    /// Draws every block according to its [`Init`].
    pub fn init(layout: &ParamLayout, rng: RngState) -> Self {
        let mut g = rng.generator();
        let mut values = vec![0.0; layout.total_len()];
        for b in layout.blocks() {
            let dst = &mut values[b.offset..b.offset + b.len()];
            match b.init {
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    for v in dst {
                        *v = g.random_range(-bound..bound);
                    }
                }
                Init::Ones => dst.fill(1.0),
                Init::Zeros => dst.fill(0.0),
            }
        }
        Self {
            values,
            layout: layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block_tensor(&self, id: BlockId) -> Tensor {
        let b = self.layout.block(id);
        Tensor::from_vec(b.shape, self.values[b.offset..b.offset + b.len()].to_vec())
            .expect("block shape matches its length")
    }

    /// Places every block on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = (0..self.layout.blocks().len())
            .map(|i| tape.leaf(self.block_tensor(BlockId(i)), trainable))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for each block of a [`ParamVector`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: BlockId) -> Var {
        self.vars[id.0]
    }

    /// Gathers the gradient of every block into one flat vector.
    pub fn flat_gradient(&self, layout: &ParamLayout, grads: &crate::autograd::Gradients) -> Vec<f64> {
        let mut flat = vec![0.0; layout.total_len()];
        for (b, v) in layout.blocks().iter().zip(&self.vars) {
            if let Some(g) = grads.get(*v) {
                flat[b.offset..b.offset + b.len()].copy_from_slice(g.data());
            }
        }
        flat
    }
}

/// Evaluates `loss_fn` on a fresh tape with `params` trainable and returns
/// the loss and its exact gradient with respect to every parameter.
pub fn loss_gradient<F>(params: &ParamVector, loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = loss_fn(&mut tape, &bound)?;
    let value = tape.value(loss).to_scalar();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    if !tape.requires_grad(loss) {
        return Ok((value, vec![0.0; params.len()]));
    }
    let grads = tape.backward(loss)?;
    Ok((value, bound.flat_gradient(&params.layout, &grads)))
}
