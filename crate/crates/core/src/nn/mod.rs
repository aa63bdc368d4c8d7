//! Minimal CPU neural-network toolkit: dense and convolutional layers with
//! hand-written backward passes, and an Adam optimizer.

mod layers;
mod optim;
mod real;
mod tensor;
mod trunk;

pub use layers::{
    global_avg_pool, global_avg_pool_backward, modulate, modulate_backward, upsample2x,
    upsample2x_backward, Act, Conv2d, ConvCache, CropResize, CropWindow, Linear, Mlp, MlpCache,
};
pub use optim::{Adam, AdamConfig, Moments};
pub use real::{gemm, Real};
pub use tensor::{Maps, Mat, Module, Param};
pub use trunk::{ConvTrunk, Stage, TrunkCache};
pub(crate) use tensor::{prefixed, prefixed_mut};
