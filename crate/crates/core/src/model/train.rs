use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GraphBatch, MoFlow};
use crate::error::{Error, Result};
use crate::molgraph::{dequantize, encode_onehot, GraphTensorPair, Molecule};
use crate::numerics::{Adam, Ctx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_batch() -> usize {
    256
}

fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: default_batch(), learning_rate: default_lr() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean over batches of the batch-mean NLL, in nats per molecule.
    pub mean_nll: f64,
    pub batches: usize,
}

/// Maximum-likelihood training with Adam. Each epoch reshuffles the data and
/// draws fresh dequantization noise for every molecule.
pub fn train<R: Rng + ?Sized>(
    model: &mut MoFlow,
    data: &[Molecule],
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let encoded: Vec<GraphTensorPair> =
        data.iter().map(|m| encode_onehot(m, &model.config.vocab)).collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<GraphTensorPair> = chunk.iter().map(|&i| dequantize(&encoded[i], rng)).collect();
            let batch = GraphBatch::from_pairs(&pairs)?;
            total += step(model, &batch, &mut adam)?;
            batches += 1;
        }
        let report = EpochReport { epoch, mean_nll: total / batches as f64, batches };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// One optimizer step; returns the batch loss.
pub(crate) fn step(model: &mut MoFlow, batch: &GraphBatch, adam: &mut Adam) -> Result<f64> {
    let MoFlow { store, net, .. } = model;
    let mut ctx = Ctx::train(store);
    let loss = net.nll(&mut ctx, batch)?;
    let value = ctx.g.value(loss).item();
    if !value.is_finite() {
        let location = ctx.first_non_finite().unwrap_or("loss").to_string();
        return Err(Error::NonFinite { location });
    }
    let mut grads = ctx.g.backward(loss)?;
    let grads = ctx.param_grads(&mut grads);
    drop(ctx);
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite { location: format!("gradient of {}", store.name(*id)) });
    }
    adam.step(store, &grads);
    Ok(value)
}
