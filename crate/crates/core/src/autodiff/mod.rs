//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
};
pub use tape::{Gradients, OpKind, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{Real, Tensor, TensorError};
