//! Minimal NHWC neural substrate with hand-written gradients.

pub mod blocks;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use blocks::{ConvNextBlock, ConvNextCache, SeBlock, SeCache};
pub use layers::{
    BatchNorm, Conv2d, ConvSpec, Deconv2d, Dense, Layer, LayerKind, LayerNorm, Mode, Sequential,
    Tape,
};
pub use params::{Adam, Grads, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
