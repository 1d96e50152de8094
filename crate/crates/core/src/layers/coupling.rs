use rand::Rng;

use super::nn::{BatchNorm, Conv3x3};
use super::FlowLayer;
use crate::error::{Error, Result};
use crate::numerics::{Ctx, Graph, ParamStore, Var};

/// Sigmoid-scaled affine coupling on the transformed part:
/// `z₂ = x₂ ⊙ σ(s) + t`, log-determinant `Σ log σ(s)` per batch item.
pub fn affine_coupling_forward(g: &mut Graph, x2: Var, s: Var, t: Var) -> Result<(Var, Var)> {
    let scale = g.sigmoid(s);
    let scaled = g.mul(x2, scale)?;
    let z2 = g.add(scaled, t)?;
    let log_scale = g.log_sigmoid(s);
    Ok((z2, g.sum_per_item(log_scale)))
}

/// `x₂ = (z₂ - t) / σ(s)`.
pub fn affine_coupling_inverse(g: &mut Graph, z2: Var, s: Var, t: Var) -> Result<Var> {
    let scale = g.sigmoid(s);
    let shifted = g.sub(z2, t)?;
    g.div(shifted, scale)
}

/// Convolutional coupling subnet: `hidden.len()` blocks of
/// conv3x3 → batch-norm → ReLU, then a zero-initialized conv3x3 with bias
/// emitting `2 · out_channels` maps split into `(s, t)`.
#[derive(Clone, Debug)]
pub struct ConvSubnet {
    pub blocks: Vec<(Conv3x3, BatchNorm)>,
    pub head: Conv3x3,
    pub out_channels: usize,
}

impl ConvSubnet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: &[usize],
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut ci = in_channels;
        for (i, &h) in hidden.iter().enumerate() {
            let conv = Conv3x3::new(store, &format!("{name}.conv{i}"), ci, h, rng);
            let bn = BatchNorm::new(store, &format!("{name}.bn{i}"), h, 1);
            blocks.push((conv, bn));
            ci = h;
        }
        let head = Conv3x3::zeros(store, &format!("{name}.head"), ci, 2 * out_channels);
        Self { blocks, head, out_channels }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for (conv, bn) in &self.blocks {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.g.relu(h);
        }
        let out = self.head.forward(ctx, h)?;
        let s = ctx.g.slice(out, 1, 0, self.out_channels)?;
        let t = ctx.g.slice(out, 1, self.out_channels, self.out_channels)?;
        Ok((s, t))
    }
}

/// Affine coupling over the channel axis of `[b, C, h, w]`: the first
/// `⌊C/2⌋` channels condition the remaining ones.
#[derive(Clone, Debug)]
pub struct ChannelCoupling {
    pub channels: usize,
    pub subnet: ConvSubnet,
}

impl ChannelCoupling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Config(format!("channel coupling needs at least 2 channels, got {channels}")));
        }
        let c1 = channels / 2;
        let subnet = ConvSubnet::new(store, &format!("{name}.subnet"), c1, hidden, channels - c1, rng);
        Ok(Self { channels, subnet })
    }

    fn split(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape("channel coupling", format!("expected {} channels, got {shape:?}", self.channels)));
        }
        let c1 = self.channels / 2;
        let x1 = ctx.g.slice(x, 1, 0, c1)?;
        let x2 = ctx.g.slice(x, 1, c1, self.channels - c1)?;
        Ok((x1, x2))
    }
}

impl FlowLayer for ChannelCoupling {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let (x1, x2) = self.split(ctx, x)?;
        let (s, t) = self.subnet.forward(ctx, x1)?;
        let (z2, logdet) = affine_coupling_forward(&mut ctx.g, x2, s, t)?;
        Ok((ctx.g.concat(x1, z2, 1)?, logdet))
    }

    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let (z1, z2) = self.split(ctx, z)?;
        let (s, t) = self.subnet.forward(ctx, z1)?;
        let x2 = affine_coupling_inverse(&mut ctx.g, z2, s, t)?;
        ctx.g.concat(z1, x2, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_subnets_halve() {
        let mut g = Graph::new();
        let x2 = g.input(Tensor::new(vec![1, 3], vec![1.0, -2.0, 4.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let (z2, ld) = affine_coupling_forward(&mut g, x2, zero, zero).unwrap();
        assert_eq!(g.value(z2).data(), &[0.5, -1.0, 2.0]);
        assert!((g.value(ld).data()[0] - 3.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_hand_case() {
        let mut g = Graph::new();
        let x2 = g.input(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let s = g.constant(Tensor::zeros(&[1, 1]));
        let t = g.constant(Tensor::ones(&[1, 1]));
        let (z2, ld) = affine_coupling_forward(&mut g, x2, s, t).unwrap();
        assert_eq!(g.value(z2).data(), &[2.0]);
        assert!((g.value(ld).data()[0] + std::f64::consts::LN_2).abs() < 1e-12);
        let back = affine_coupling_inverse(&mut g, z2, s, t).unwrap();
        assert_eq!(g.value(back).data(), &[2.0]);
    }
}
