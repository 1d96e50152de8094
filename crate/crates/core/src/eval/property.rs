use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chemio::canonical_key;
use crate::error::{Error, Result};
use crate::layers::nn::Mlp;
use crate::model::{LatentVector, MoFlow};
use crate::molgraph::Molecule;
use crate::numerics::{Adam, Ctx, ParamStore, Tensor};

use super::fingerprint::{fingerprint, tanimoto};

/// Similarity thresholds evaluated by default in constrained optimization.
pub const DELTA_GRID: [f64; 4] = [0.0, 0.2, 0.4, 0.6];
pub const REGRESSOR_HIDDEN: usize = 18;
/// Maximum step halvings tried before an ascent step is rejected.
const MAX_HALVINGS: usize = 30;

/// Structural surrogate properties computable from the graph alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    HeavyAtoms,
    /// Cycle rank `E − V + components`.
    Rings,
    BondOrderSum,
}

impl Property {
    pub const ALL: [Property; 3] = [Property::HeavyAtoms, Property::Rings, Property::BondOrderSum];

    pub fn evaluate(self, m: &Molecule) -> f64 {
        match self {
            Property::HeavyAtoms => m.num_atoms() as f64,
            Property::Rings => (m.bonds().len() + m.components().len()) as f64 - m.num_atoms() as f64,
            Property::BondOrderSum => m.total_bond_order() as f64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Property::HeavyAtoms => "heavy_atoms",
            Property::Rings => "rings",
            Property::BondOrderSum => "bond_order_sum",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Property::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown property `{s}` (expected heavy_atoms, rings or bond_order_sum)")))
    }
}

/// A differentiable score over flat latent vectors.
pub trait LatentScore {
    fn score_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn score(&self, z: &[f64]) -> Result<f64> {
        Ok(self.score_grad(z)?.0)
    }
}

/// Adapter turning a closure into a [`LatentScore`].
pub struct FnScore<F>(pub F);

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> LatentScore for FnScore<F> {
    fn score_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.0)(z))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 64, learning_rate: 1e-3 }
    }
}

/// Perceptron `latent → hidden → ReLU → scalar`.
pub struct PropertyRegressor {
    pub input_dim: usize,
    pub store: ParamStore,
    mlp: Mlp,
}

impl PropertyRegressor {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "regressor", &[input_dim, hidden, 1], false, rng);
        Self { input_dim, store, mlp }
    }

    pub fn predict(&self, zs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut ctx = Ctx::frozen(&self.store);
        let x = ctx.constant(self.stack(zs)?);
        let y = self.mlp.forward(&mut ctx, x)?;
        Ok(ctx.g.value(y).data().to_vec())
    }

    fn stack(&self, zs: &[Vec<f64>]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(zs.len() * self.input_dim);
        for z in zs {
            if z.len() != self.input_dim {
                return Err(Error::shape("regressor", format!("latent of length {} vs {}", z.len(), self.input_dim)));
            }
            data.extend_from_slice(z);
        }
        Tensor::new(vec![zs.len(), self.input_dim], data)
    }

    /// Mean-squared-error fit with Adam; returns the mean batch loss per epoch.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        xs: &[Vec<f64>],
        ys: &[f64],
        cfg: &RegressorConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Config(format!("regressor needs matching nonempty data ({} vs {})", xs.len(), ys.len())));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("regressor.batch_size must be at least 1".into()));
        }
        let mut adam = Adam::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
                let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
                let x = self.stack(&bx)?;
                let mut ctx = Ctx::with_grads(&self.store, crate::numerics::Mode::Frozen);
                let xv = ctx.constant(x);
                let pred = self.mlp.forward(&mut ctx, xv)?;
                let target = ctx.constant(Tensor::new(vec![by.len(), 1], by)?);
                let err = ctx.g.sub(pred, target)?;
                let sq = ctx.g.mul(err, err)?;
                let loss = ctx.g.mean(sq);
                let value = ctx.g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite { location: "regressor loss".into() });
                }
                let mut grads = ctx.g.backward(loss)?;
                let grads = ctx.param_grads(&mut grads);
                drop(ctx);
                adam.step(&mut self.store, &grads);
                total += value;
                batches += 1;
            }
            history.push(total / batches as f64);
        }
        Ok(history)
    }
}

impl LatentScore for PropertyRegressor {
    fn score_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut ctx = Ctx::frozen(&self.store);
        let x = ctx.g.input(self.stack(&[z.to_vec()])?);
        let y = self.mlp.forward(&mut ctx, x)?;
        let s = ctx.g.sum(y);
        let grads = ctx.g.backward(s)?;
        let grad = grads.get(x).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.len()]);
        Ok((ctx.g.value(s).item(), grad))
    }
}

/// One point on an ascent path.
#[derive(Clone, Debug, PartialEq)]
pub struct AscentStep {
    pub z: Vec<f64>,
    pub score: f64,
    /// Step size accepted to reach this point (0 for the seed or a rejected step).
    pub step_size: f64,
}

/// `K` steps of `z ← z + λ·∇y(z)`. A step that lowers the score is retried
/// with halved step sizes and skipped if none helps, so scores never decrease.
pub fn ascend(z0: &[f64], scorer: &dyn LatentScore, lambda: f64, steps: usize) -> Result<Vec<AscentStep>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("step size must be non-negative, got {lambda}")));
    }
    let mut z = z0.to_vec();
    let (mut score, mut grad) = scorer.score_grad(&z)?;
    let mut path = vec![AscentStep { z: z.clone(), score, step_size: 0.0 }];
    for _ in 0..steps {
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite { location: "property gradient".into() });
        }
        let mut eta = lambda;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = z.iter().zip(&grad).map(|(a, g)| a + eta * g).collect();
            let (s, g) = scorer.score_grad(&cand)?;
            if s.is_finite() && s >= score {
                accepted = Some((cand, s, g));
                break;
            }
            eta *= 0.5;
        }
        let used = match accepted {
            Some((cand, s, g)) => {
                z = cand;
                score = s;
                grad = g;
                eta
            }
            None => 0.0,
        };
        path.push(AscentStep { z: z.clone(), score, step_size: used });
    }
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub step: AscentStep,
    pub molecule: Molecule,
}

/// Gradient ascent in latent space, decoding every point; the trajectory
/// holds the seed plus `steps` points.
pub fn optimize_property(
    model: &MoFlow,
    z: &LatentVector,
    scorer: &dyn LatentScore,
    lambda: f64,
    steps: usize,
    apply_correction: bool,
) -> Result<Vec<TrajectoryPoint>> {
    let path = ascend(&z.to_flat(), scorer, lambda, steps)?;
    let zs: Vec<LatentVector> = path.iter().map(|p| LatentVector::from_flat(&p.z, z.atom.len())).collect();
    let mols = model.decode(&zs, apply_correction)?;
    Ok(path.into_iter().zip(mols).map(|(step, molecule)| TrajectoryPoint { step, molecule }).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Ascent step that produced the candidate (1-based).
    pub step: usize,
    pub molecule: Molecule,
    pub property: f64,
    pub improvement: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedResult {
    pub seed_property: f64,
    pub delta: f64,
    pub candidates: Vec<Candidate>,
    pub best: Option<Candidate>,
    pub success: bool,
}

/// Best admissible candidate: different from the seed, non-negative
/// improvement, similarity at least `delta`. Ties prefer higher similarity,
/// then the earlier step.
pub fn select_best(seed: &Molecule, candidates: &[Candidate], delta: f64) -> Option<Candidate> {
    let key = canonical_key(seed);
    let mut best: Option<&Candidate> = None;
    for c in candidates {
        if c.improvement < 0.0 || c.similarity < delta || canonical_key(&c.molecule) == key {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => (c.improvement, c.similarity) > (b.improvement, b.similarity),
        };
        if better {
            best = Some(c);
        }
    }
    best.cloned()
}

/// Ascend from the encoding of `seed` and keep the best decoded molecule
/// that improves `property` while staying within similarity `delta`.
pub fn constrained_optimize(
    model: &MoFlow,
    seed: &Molecule,
    property: Property,
    scorer: &dyn LatentScore,
    delta: f64,
    lambda: f64,
    steps: usize,
) -> Result<ConstrainedResult> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("delta must lie in [0, 1], got {delta}")));
    }
    let z = model.encode_molecules(std::slice::from_ref(seed))?.remove(0).z;
    let traj = optimize_property(model, &z, scorer, lambda, steps, true)?;
    let seed_property = property.evaluate(seed);
    let seed_fp = fingerprint(seed);
    let candidates: Vec<Candidate> = traj
        .into_iter()
        .enumerate()
        .skip(1)
        .map(|(step, p)| {
            let value = property.evaluate(&p.molecule);
            Candidate {
                step,
                similarity: tanimoto(&seed_fp, &fingerprint(&p.molecule)),
                property: value,
                improvement: value - seed_property,
                molecule: p.molecule,
            }
        })
        .collect();
    let best = select_best(seed, &candidates, delta);
    Ok(ConstrainedResult { seed_property, delta, success: best.is_some(), best, candidates })
}
