//! Reverse-mode differentiation over flat parameter vectors, the MLP built on
//! top of it, and the AdamW optimizer used by every trained network.

mod mlp;
mod optim;
mod tape;
mod tensor;

pub use mlp::{backprop, mlp_forward, param_count, Mlp};
pub use optim::{clip_grad_norm, l2_norm, AdamW, AdamWConfig};
pub use tape::{Activation, Gradients, NodeId, Tape};
pub use tensor::TensorBuf;
