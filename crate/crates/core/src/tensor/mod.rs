//! Dense tensors and the differentiable primitives every block is built from.

mod autograd;
mod dense;
pub mod ops;
mod params;
mod rng;

pub use autograd::{BatchStats, BnMode, Gradients, Tape, Var};
pub use dense::{Float, Tensor};
pub use ops::{
    avg_pool2d, batch_norm2d, bilinear_upsample, conv2d, droppath, gelu, BatchNormState, ConvGeometry,
    ConvParams, Mode, RunningStats,
};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use rng::RngState;

pub(crate) use dense::read_u32;
