use serde::{Deserialize, Serialize};

use super::FlowLayer;
use crate::error::{Error, Result};
use crate::numerics::{Ctx, Mode, ParamId, ParamStore, Tensor, Var};

/// Variance epsilon used by data-dependent initialization.
pub const ACTNORM_EPS: f64 = 1e-6;

/// How an actnorm layer reports its log-determinant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDetRule {
    /// `inner · Σ log_scale`, the true log-Jacobian of the affine map.
    #[default]
    Exact,
    /// `inner · Σ |log_scale|`, i.e. `(inner/2) Σ |log(σ² + ε)|` right after
    /// initialization. Not a valid change-of-variables term.
    AbsLogVariance,
}

/// Affine normalization along axis 1: `y = (x + bias) · exp(log_scale)`.
///
/// Covers both the per-channel variant (`[b, c, h, w]`) and the per-row
/// variant on atom matrices (`[b, n, k]`). The first train-mode batch sets
/// `bias = -mean` and `log_scale = -½ log(var + ε)`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub bias: ParamId,
    pub log_scale: ParamId,
    pub initialized: ParamId,
    pub rule: LogDetRule,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, rule: LogDetRule) -> Self {
        Self {
            bias: store.param(format!("{name}.bias"), Tensor::zeros(&[features])),
            log_scale: store.param(format!("{name}.log_scale"), Tensor::zeros(&[features])),
            initialized: store.buffer(format!("{name}.initialized"), Tensor::scalar(0.0)),
            rule,
        }
    }

    pub fn is_initialized(&self, store: &ParamStore) -> bool {
        store.get(self.initialized).item() != 0.0
    }

    fn maybe_initialize(&self, ctx: &mut Ctx, x: Var) {
        if ctx.mode() != Mode::Train || self.is_initialized(ctx.store()) {
            return;
        }
        let xv = ctx.g.value(x);
        let (outer, len, inner) = xv.axis_split(1);
        let cnt = (outer * inner) as f64;
        let d = xv.data();
        let mut mean = vec![0.0; len];
        let mut var = vec![0.0; len];
        for o in 0..outer {
            for a in 0..len {
                let s = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                mean[a] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for o in 0..outer {
            for a in 0..len {
                let s = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                var[a] += s.iter().map(|v| (v - mean[a]).powi(2)).sum::<f64>();
            }
        }
        let bias: Vec<f64> = mean.iter().map(|m| -m).collect();
        let log_scale: Vec<f64> = var.iter().map(|v| -0.5 * (v / cnt + ACTNORM_EPS).ln()).collect();
        let Some(store) = ctx.store_mut() else { return };
        store.set(self.bias, Tensor::vector(bias));
        store.set(self.log_scale, Tensor::vector(log_scale));
        store.set(self.initialized, Tensor::scalar(1.0));
        ctx.rebind(self.bias);
        ctx.rebind(self.log_scale);
    }

    /// Scalar log-determinant for one item with `inner` entries per feature.
    pub fn logdet_value(&self, store: &ParamStore, inner: usize) -> f64 {
        let ls = store.get(self.log_scale).data();
        let s: f64 = match self.rule {
            LogDetRule::Exact => ls.iter().sum(),
            LogDetRule::AbsLogVariance => ls.iter().map(|v| v.abs()).sum(),
        };
        inner as f64 * s
    }
}

impl FlowLayer for ActNorm {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("actnorm", format!("input {shape:?} lacks a feature axis")));
        }
        self.maybe_initialize(ctx, x);
        let bias = ctx.param(self.bias);
        let ls = ctx.param(self.log_scale);
        let scale = ctx.g.exp(ls);
        let shifted = ctx.g.bcast_add(x, bias, 1)?;
        let y = ctx.g.bcast_mul(shifted, scale, 1)?;
        let inner: usize = shape[2..].iter().product();
        let per_feature = match self.rule {
            LogDetRule::Exact => ls,
            LogDetRule::AbsLogVariance => ctx.g.abs(ls),
        };
        let total = ctx.g.sum(per_feature);
        let total = ctx.g.scale(total, inner as f64);
        let logdet = ctx.g.expand(total, &[shape[0]])?;
        Ok((y, logdet))
    }

    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        let bias = ctx.store().get(self.bias).map(|b| -b);
        let inv_scale = ctx.store().get(self.log_scale).map(|l| (-l).exp());
        let inv_scale = ctx.constant(inv_scale);
        let bias = ctx.constant(bias);
        let unscaled = ctx.g.bcast_mul(z, inv_scale, 1)?;
        ctx.g.bcast_add(unscaled, bias, 1)
    }
}
