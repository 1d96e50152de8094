//! Non-invertible building blocks used inside coupling subnets.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{frozen_norm, Ctx, Mode, ParamId, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential update.
pub const BN_MOMENTUM: f64 = 0.9;

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Randomize every parameter so tests exercise non-trivial layers.
///
/// Trainable entries get additive Gaussian noise of standard deviation
/// `scale / sqrt(fan_in)` for weight matrices and kernels, `scale` otherwise.
/// Running means are drawn from `N(0, scale²)`, running variances from
/// `U[0.5, 1.5)`, and actnorm layers are marked initialized.
pub fn randomize_parameters<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let shape = store.get(id).shape().to_vec();
        let value = if name.ends_with(".running_var") {
            let n = store.get(id).numel();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).expect("shape")
        } else if name.ends_with(".initialized") {
            Tensor::scalar(1.0)
        } else if name.ends_with(".running_mean") {
            gaussian(rng, &shape, scale)
        } else if store.is_trainable(id) {
            let fan_in = if name.ends_with(".kernel") {
                shape[1] * 9
            } else if name.ends_with(".weight") {
                shape[0]
            } else {
                1
            };
            let mut v = store.get(id).clone();
            v.add_assign(&gaussian(rng, &shape, scale / (fan_in as f64).sqrt()));
            v
        } else {
            continue;
        };
        store.set(id, value);
    }
}

/// Batch normalization without affine terms, normalizing each index of
/// `axis` over all remaining axes.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub axis: usize,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, axis: usize) -> Self {
        Self {
            axis,
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[features])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[features])),
        }
    }

    /// Train mode normalizes with batch statistics and, given exclusive store
    /// access, folds them into the running estimates; frozen mode uses the
    /// running estimates.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match ctx.mode() {
            Mode::Train => {
                let y = ctx.g.batch_norm(x, self.axis, BN_EPS)?;
                let (mean, var) = {
                    let (m, v) = ctx.g.batch_stats(y).expect("batch_norm node");
                    (m.to_vec(), v.to_vec())
                };
                if let Some(store) = ctx.store_mut() {
                    for (id, batch) in [(self.running_mean, mean), (self.running_var, var)] {
                        let run = store.get_mut(id);
                        for (r, b) in run.data_mut().iter_mut().zip(batch) {
                            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                        }
                    }
                }
                Ok(y)
            }
            Mode::Frozen => {
                let mean = ctx.store().get(self.running_mean).clone();
                let var = ctx.store().get(self.running_var).clone();
                frozen_norm(&mut ctx.g, x, &mean, &var, self.axis, BN_EPS)
            }
        }
    }
}

/// Fully connected layer acting on the last axis: `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: store.param(format!("{name}.weight"), gaussian(rng, &[fan_in, fan_out], std)),
            bias: store.param(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.param(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: store.param(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.g.matmul(x, w)?;
        let last = ctx.g.shape(y).len() - 1;
        ctx.g.bcast_add(y, b, last)
    }
}

/// Perceptron with ReLU between layers; the last layer may start at zero.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lname = format!("{name}.{i}");
                if i == last && zero_last {
                    Linear::zeros(store, &lname, w[0], w[1])
                } else {
                    Linear::new(store, &lname, w[0], w[1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i + 1 < self.layers.len() {
                x = ctx.g.relu(x);
            }
        }
        Ok(x)
    }
}

/// 3×3 convolution (padding 1) with an optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ci: usize, co: usize, rng: &mut R) -> Self {
        let std = (2.0 / (9 * ci) as f64).sqrt();
        Self { kernel: store.param(format!("{name}.kernel"), gaussian(rng, &[co, ci, 3, 3], std)), bias: None }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, ci: usize, co: usize) -> Self {
        Self {
            kernel: store.param(format!("{name}.kernel"), Tensor::zeros(&[co, ci, 3, 3])),
            bias: Some(store.param(format!("{name}.bias"), Tensor::zeros(&[co]))),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        let y = ctx.g.conv3x3(x, k)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.g.bcast_add(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, 1);
        let mut ctx = Ctx::train(&mut store);
        let x = ctx.g.input(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let y = bn.forward(&mut ctx, x).unwrap();
        assert!((ctx.g.value(y).data()[0] + 1.0).abs() < 1e-5);
        drop(ctx);
        assert!((store.get(bn.running_mean).item() - 0.2).abs() < 1e-12);
        assert!((store.get(bn.running_var).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_uses_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, 1);
        store.set(bn.running_mean, Tensor::vector(vec![1.0, -1.0]));
        let mut ctx = Ctx::frozen(&store);
        let x = ctx.g.input(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = bn.forward(&mut ctx, x).unwrap();
        let v = ctx.g.value(y).data();
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] - 2.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], true, &mut rng);
        let mut ctx = Ctx::frozen(&store);
        let x = ctx.g.input(gaussian(&mut rng, &[5, 3], 1.0));
        let y = mlp.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[5, 2]);
        assert!(ctx.g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
