//! Dense tensors, reverse-mode differentiation and gradient verification.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, log_abs_det, numerical_jacobian};
pub use graph::{log_sigmoid, sigmoid, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Ctx, Mode, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Inference-mode batch normalization: `(x - mean) / sqrt(var + eps)` with
/// frozen per-index statistics along `axis`.
pub fn frozen_norm(g: &mut Graph, x: Var, mean: &Tensor, var: &Tensor, axis: usize, eps: f64) -> Result<Var> {
    let neg_mean = g.constant(mean.map(|m| -m));
    let inv_std = g.constant(var.map(|v| 1.0 / (v + eps).sqrt()));
    let centered = g.bcast_add(x, neg_mean, axis)?;
    g.bcast_mul(centered, inv_std, axis)
}
