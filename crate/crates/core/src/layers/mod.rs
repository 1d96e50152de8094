//! Invertible layers shared by the bond and atom flows.

mod actnorm;
mod coupling;
mod dense;
mod inv1x1;
pub mod nn;

pub use actnorm::{ActNorm, LogDetRule, ACTNORM_EPS};
pub use coupling::{affine_coupling_forward, affine_coupling_inverse, ChannelCoupling, ConvSubnet};
pub use dense::{DenseCoupling, ToyFlow};
pub use inv1x1::{random_rotation, Inv1x1};
pub use nn::randomize_parameters;

use crate::error::Result;
use crate::numerics::{Ctx, Var};

/// An invertible map on batched tensors.
///
/// `forward` returns the output and a `[b]` vector of per-item
/// log-determinants; `inverse` undoes `forward` under the same parameters
/// and mode.
pub trait FlowLayer: Send + Sync {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)>;
    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var>;
}

/// Space-to-channel reshuffle `[b, c, n, n] -> [b, c·h², n/h, n/h]`.
#[derive(Clone, Copy, Debug)]
pub struct Squeeze {
    pub factor: usize,
}

impl FlowLayer for Squeeze {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let b = ctx.g.shape(x)[0];
        let y = ctx.g.squeeze(x, self.factor)?;
        let zero = ctx.constant(crate::numerics::Tensor::zeros(&[b]));
        Ok((y, zero))
    }

    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        ctx.g.unsqueeze(z, self.factor)
    }
}

/// Exact inverse of [`Squeeze`] as a layer of its own.
#[derive(Clone, Copy, Debug)]
pub struct Unsqueeze {
    pub factor: usize,
}

impl FlowLayer for Unsqueeze {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let b = ctx.g.shape(x)[0];
        let y = ctx.g.unsqueeze(x, self.factor)?;
        let zero = ctx.constant(crate::numerics::Tensor::zeros(&[b]));
        Ok((y, zero))
    }

    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        ctx.g.squeeze(z, self.factor)
    }
}

/// Sequential composition; the log-determinant is the sum over layers.
/// Intermediate outputs are traced as `"{label} layer {i}"`.
#[derive(Default)]
pub struct FlowStack {
    label: String,
    layers: Vec<Box<dyn FlowLayer>>,
}

impl FlowStack {
    pub fn named(label: impl Into<String>) -> Self {
        Self { label: label.into(), layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl FlowLayer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn FlowLayer>] {
        &self.layers
    }
}

impl FlowLayer for FlowStack {
    fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<(Var, Var)> {
        let b = ctx.g.shape(x)[0];
        let mut total = ctx.constant(crate::numerics::Tensor::zeros(&[b]));
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(ctx, x)?;
            ctx.trace(format!("{} layer {i}", self.label), y);
            total = ctx.g.add(total, ld)?;
            x = y;
        }
        Ok((x, total))
    }

    fn inverse(&self, ctx: &mut Ctx, mut z: Var) -> Result<Var> {
        for layer in self.layers.iter().rev() {
            z = layer.inverse(ctx, z)?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, Tensor};

    #[test]
    fn squeeze_shapes() {
        let store = ParamStore::new();
        for (n, h, out) in [(38, 2, [1, 16, 19, 19]), (9, 3, [1, 36, 3, 3])] {
            let mut ctx = Ctx::frozen(&store);
            let x = ctx.g.input(Tensor::zeros(&[1, 4, n, n]));
            let (y, ld) = Squeeze { factor: h }.forward(&mut ctx, x).unwrap();
            assert_eq!(ctx.g.shape(y), &out);
            assert_eq!(ctx.g.value(ld).data(), &[0.0]);
        }
        let mut ctx = Ctx::frozen(&store);
        let x = ctx.g.input(Tensor::zeros(&[1, 4, 9, 9]));
        assert!(Squeeze { factor: 2 }.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn squeeze_round_trip() {
        let store = ParamStore::new();
        let data: Vec<f64> = (0..2 * 4 * 6 * 6).map(|v| v as f64).collect();
        let x = Tensor::new(vec![2, 4, 6, 6], data).unwrap();
        let mut ctx = Ctx::frozen(&store);
        let xv = ctx.g.input(x.clone());
        let sq = Squeeze { factor: 3 };
        let (y, _) = sq.forward(&mut ctx, xv).unwrap();
        let back = sq.inverse(&mut ctx, y).unwrap();
        assert_eq!(ctx.g.value(back), &x);
    }
}
