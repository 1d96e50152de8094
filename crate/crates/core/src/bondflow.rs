//! Glow-style flow over bond tensors: squeeze, `K` steps of
//! actnorm → invertible 1×1 convolution → channel coupling, unsqueeze.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ActNorm, ChannelCoupling, FlowLayer, FlowStack, Inv1x1, LogDetRule, Squeeze, Unsqueeze};
use crate::molgraph::VIRTUAL_BOND;
use crate::numerics::{Ctx, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BondFlowConfig {
    pub n_coupling_layers: usize,
    /// `None` picks 3 when `n_max` is divisible by 3, else 2.
    #[serde(default)]
    pub squeeze_factor: Option<usize>,
    pub conv_hidden_dims: Vec<usize>,
}

impl BondFlowConfig {
    pub fn qm9() -> Self {
        Self { n_coupling_layers: 10, squeeze_factor: Some(3), conv_hidden_dims: vec![128, 128] }
    }

    pub fn zinc250k() -> Self {
        Self { n_coupling_layers: 10, squeeze_factor: Some(2), conv_hidden_dims: vec![512, 512] }
    }

    pub fn factor_for(&self, n: usize) -> usize {
        self.squeeze_factor.unwrap_or(if n % 3 == 0 { 3 } else { 2 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coupling_layers == 0 {
            return Err(Error::Config("bond.n_coupling_layers must be at least 1".into()));
        }
        if self.squeeze_factor == Some(0) {
            return Err(Error::Config("bond.squeeze_factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Spatial extent after padding `n` up to a multiple of `factor`.
pub fn padded_extent(n: usize, factor: usize) -> usize {
    n.div_ceil(factor) * factor
}

/// Pad `[b, c, n, n]` to `[b, c, m, m]`; new entries are one-hot at the
/// virtual bond channel.
pub fn pad_bonds(b: &Tensor, m: usize) -> Tensor {
    let s = b.shape();
    let (batch, c, n) = (s[0], s[1], s[2]);
    if m == n {
        return b.clone();
    }
    let mut out = Tensor::zeros(&[batch, c, m, m]);
    let src = b.data();
    let dst = out.data_mut();
    for bi in 0..batch {
        for l in 0..c {
            for i in 0..m {
                for j in 0..m {
                    dst[((bi * c + l) * m + i) * m + j] = if i < n && j < n {
                        src[((bi * c + l) * n + i) * n + j]
                    } else if l == VIRTUAL_BOND {
                        1.0
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    out
}

/// Keep the leading `n × n` block of `[b, c, m, m]`.
pub fn crop_bonds(b: &Tensor, n: usize) -> Tensor {
    let s = b.shape();
    let (batch, c, m) = (s[0], s[1], s[2]);
    if m == n {
        return b.clone();
    }
    let mut out = Tensor::zeros(&[batch, c, n, n]);
    let src = b.data();
    let dst = out.data_mut();
    for bl in 0..batch * c {
        for i in 0..n {
            for j in 0..n {
                dst[(bl * n + i) * n + j] = src[(bl * m + i) * m + j];
            }
        }
    }
    out
}

/// The bond flow `f_B` over padded tensors `[b, c, m, m]`.
pub struct BondFlow {
    pub config: BondFlowConfig,
    pub channels: usize,
    pub n: usize,
    pub padded: usize,
    pub factor: usize,
    stack: FlowStack,
}

impl BondFlow {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &BondFlowConfig,
        channels: usize,
        n: usize,
        rule: LogDetRule,
        rng: &mut R,
    ) -> Result<Self> {
        let factor = config.factor_for(n);
        if factor == 0 {
            return Err(Error::Config("bond.squeeze_factor must be at least 1".into()));
        }
        let padded = padded_extent(n, factor);
        let width = channels * factor * factor;
        let mut stack = FlowStack::named("bond");
        stack.push(Squeeze { factor });
        for k in 0..config.n_coupling_layers {
            let name = format!("bond.{k}");
            stack.push(ActNorm::new(store, &format!("{name}.actnorm"), width, rule));
            stack.push(Inv1x1::new(store, &format!("{name}.inv1x1"), width, rng));
            stack.push(ChannelCoupling::new(store, &format!("{name}.coupling"), width, &config.conv_hidden_dims, rng)?);
        }
        stack.push(Unsqueeze { factor });
        Ok(Self { config: config.clone(), channels, n, padded, factor, stack })
    }

    /// Number of latent dimensions per molecule.
    pub fn latent_dim(&self) -> usize {
        self.channels * self.padded * self.padded
    }

    pub fn stack(&self) -> &FlowStack {
        &self.stack
    }

    fn check(&self, ctx: &Ctx, x: Var) -> Result<()> {
        let s = ctx.g.shape(x);
        if s.len() != 4 || s[1] != self.channels || s[2] != self.padded || s[3] != self.padded {
            return Err(Error::shape(
                "bond flow",
                format!("expected [b, {}, {p}, {p}], got {s:?}", self.channels, p = self.padded),
            ));
        }
        Ok(())
    }
}

impl FlowLayer for BondFlow {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        self.check(ctx, x)?;
        self.stack.forward(ctx, x)
    }

    fn inverse(&self, ctx: &mut Ctx, z: Var) -> Result<Var> {
        self.check(ctx, z)?;
        self.stack.inverse(ctx, z)
    }
}
