use nalgebra::DMatrix;
use rand::Rng;

use super::nn::gaussian;
use super::FlowLayer;
use crate::error::{Error, Result};
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

/// Channel mixing by a learned square matrix applied at every position.
#[derive(Clone, Debug)]
pub struct Inv1x1 {
    pub weight: ParamId,
    pub channels: usize,
}

/// Haar-style random orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, c: usize) -> Tensor {
    let g = gaussian(rng, &[c, c], 1.0);
    let m = DMatrix::from_row_slice(c, c, g.data());
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            data[i * c + j] = q[(i, j)];
        }
    }
    Tensor::new(vec![c, c], data).expect("square")
}

pub(crate) fn inverse_matrix(w: &Tensor) -> Result<Tensor> {
    let c = w.shape()[0];
    let m = DMatrix::from_row_slice(c, c, w.data());
    let lu = m.lu();
    if lu.determinant().abs().is_nan() || lu.determinant().abs() <= 1e-12 {
        return Err(Error::Singular(format!("1x1 convolution weight ({c}x{c})")));
    }
    let inv = lu.try_inverse().ok_or_else(|| Error::Singular("1x1 convolution weight".into()))?;
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            data[i * c + j] = inv[(i, j)];
        }
    }
    Tensor::new(vec![c, c], data)
}

impl Inv1x1 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        Self { weight: store.param(format!("{name}.weight"), random_rotation(rng, channels)), channels }
    }
}

impl FlowLayer for Inv1x1 {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("inv1x1", format!("expected [b, c, h, w], got {shape:?}")));
        }
        let w = ctx.param(self.weight);
        let y = ctx.g.conv1x1(x, w)?;
        let lad = ctx.g.logabsdet(w)?;
        let lad = ctx.g.scale(lad, (shape[2] * shape[3]) as f64);
        let logdet = ctx.g.expand(lad, &[shape[0]])?;
        Ok((y, logdet))
    }

    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let inv = inverse_matrix(ctx.store().get(self.weight))?;
        let inv = ctx.constant(inv);
        ctx.g.conv1x1(z, inv)
    }
}
