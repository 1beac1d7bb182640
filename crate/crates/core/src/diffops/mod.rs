//! Differentiable operator kernels: eager forward evaluation on [`Tensor`]s
//! plus a [`Tape`] that records them for reverse-mode gradients.

mod activation;
mod conv;
mod gradcheck;
mod linalg;
mod losses;
mod norm;
mod tape;

pub use activation::{gelu, gelu_scalar, leaky_relu, softmax};
pub use conv::{conv3d, conv3d_transpose, ConvGeom};
pub use gradcheck::{grad_check, grad_check_inputs, grad_check_params, Coords};
pub use linalg::{linear, matmul};
pub use losses::{cross_entropy, l1_mean, soft_dice};
pub use norm::{instance_norm, layer_norm};
pub use tape::{Gradients, Tape, Var, PAD};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean over every spatial position of `[C, spatial...]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.dims()[0];
    let per = x.len() / c;
    let n = T::from_usize(per).expect("count");
    Tensor::from_fn(&[c], |i| x.data()[i * per..(i + 1) * per].iter().copied().sum::<T>() / n)
}

/// `x / ‖x‖₂` for a vector; zero vectors are rejected.
pub fn l2_normalize<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.data().iter().map(|&v| v * v).sum::<T>().sqrt();
    if n <= T::zero() || !n.is_finite() {
        return Err(Error::Degenerate("l2_normalize of a zero vector".into()));
    }
    Ok(x.map(|v| v / n))
}
