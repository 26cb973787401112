//! Mask-conditioned denoising diffusion with polyp/background loss
//! re-weighting and segmentation-guided refinement, on CPU in `f64`.

pub mod autograd;
pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod seg_oracle;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
