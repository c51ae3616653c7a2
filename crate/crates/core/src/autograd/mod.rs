//! Dense tensors, a reverse-mode tape, and the RMSProp optimizer.

pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{clip_gradients, global_norm, RmsPropState};
pub use tape::{conv_extent, pool_extent, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};

/// Max-subtracted softmax of a plain slice, outside any tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    tape::softmax_in_place(&mut out);
    out
}
