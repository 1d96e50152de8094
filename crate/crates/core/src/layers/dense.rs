use rand::Rng;

use super::actnorm::{ActNorm, LogDetRule};
use super::coupling::{affine_coupling_forward, affine_coupling_inverse};
use super::nn::Mlp;
use super::{FlowLayer, FlowStack};
use crate::error::{Error, Result};
use crate::numerics::{Ctx, ParamStore, Tensor, Var};

/// Affine coupling on feature vectors `[b, d]`. Without `flip` the leading
/// `⌊d/2⌋` features condition the rest; with `flip` the roles swap.
#[derive(Clone, Debug)]
pub struct DenseCoupling {
    pub dim: usize,
    pub flip: bool,
    pub subnet: Mlp,
}

impl DenseCoupling {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: &[usize],
        flip: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("dense coupling needs dim >= 2, got {dim}")));
        }
        let (cond, moved) = Self::sizes(dim, flip);
        let mut dims = vec![cond];
        dims.extend_from_slice(hidden);
        dims.push(2 * moved);
        Ok(Self { dim, flip, subnet: Mlp::new(store, &format!("{name}.subnet"), &dims, true, rng) })
    }

    fn sizes(dim: usize, flip: bool) -> (usize, usize) {
        let half = dim / 2;
        if flip {
            (dim - half, half)
        } else {
            (half, dim - half)
        }
    }

    /// `(conditioning, transformed)` parts.
    fn split(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let half = self.dim / 2;
        let a = ctx.g.slice(x, 1, 0, half)?;
        let b = ctx.g.slice(x, 1, half, self.dim - half)?;
        Ok(if self.flip { (b, a) } else { (a, b) })
    }

    fn join(&self, ctx: &mut Ctx, cond: Var, moved: Var) -> Result<Var> {
        if self.flip {
            ctx.g.concat(moved, cond, 1)
        } else {
            ctx.g.concat(cond, moved, 1)
        }
    }

    fn st(&self, ctx: &mut Ctx, cond: Var) -> Result<(Var, Var)> {
        let (_, moved) = Self::sizes(self.dim, self.flip);
        let out = self.subnet.forward(ctx, cond)?;
        Ok((ctx.g.slice(out, 1, 0, moved)?, ctx.g.slice(out, 1, moved, moved)?))
    }
}

impl FlowLayer for DenseCoupling {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let (cond, moved) = self.split(ctx, x)?;
        let (s, t) = self.st(ctx, cond)?;
        let (z, logdet) = affine_coupling_forward(&mut ctx.g, moved, s, t)?;
        Ok((self.join(ctx, cond, z)?, logdet))
    }

    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let (cond, moved) = self.split(ctx, z)?;
        let (s, t) = self.st(ctx, cond)?;
        let x = affine_coupling_inverse(&mut ctx.g, moved, s, t)?;
        self.join(ctx, cond, x)
    }
}

/// Small density model on `R^d` (actnorm + alternating dense couplings under
/// a standard normal prior); used for quadrature checks of normalization.
pub struct ToyFlow {
    pub dim: usize,
    pub stack: FlowStack,
}

impl ToyFlow {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, depth: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut stack = FlowStack::default();
        for i in 0..depth {
            stack.push(ActNorm::new(store, &format!("toy.{i}.actnorm"), dim, LogDetRule::Exact));
            stack.push(DenseCoupling::new(store, &format!("toy.{i}.coupling"), dim, hidden, i % 2 == 1, rng)?);
        }
        Ok(Self { dim, stack })
    }

    /// Log-density of each row of `points: [b, d]` under frozen parameters.
    pub fn log_density(&self, store: &ParamStore, points: &Tensor) -> Result<Vec<f64>> {
        let mut ctx = Ctx::frozen(store);
        let x = ctx.g.input(points.clone());
        let (z, logdet) = self.stack.forward(&mut ctx, x)?;
        let z = ctx.g.value(z);
        let ld = ctx.g.value(logdet).data();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        Ok(z
            .data()
            .chunks(self.dim)
            .zip(ld)
            .map(|(row, l)| row.iter().map(|v| -half_log_2pi - 0.5 * v * v).sum::<f64>() + l)
            .collect())
    }
}
