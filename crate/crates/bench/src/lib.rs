//! Shared fixtures for the benchmarks.

use moflow_core::chemio::synth::synthesize_dataset;
use moflow_core::model::{GraphBatch, ModelConfig, MoFlow};
use moflow_core::molgraph::Molecule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Full-size QM9 architecture with fresh parameters.
pub fn qm9_model() -> MoFlow {
    MoFlow::new(ModelConfig::qm9(), &mut rng(1)).expect("preset is valid")
}

pub fn molecules(count: usize) -> Vec<Molecule> {
    synthesize_dataset(&mut rng(2), count, 9)
}

/// Dequantized batch of `count` synthetic molecules for `model`.
pub fn batch(model: &MoFlow, count: usize) -> GraphBatch {
    GraphBatch::from_molecules(&molecules(count), model.vocab(), Some(&mut rng(3))).expect("synthetic data encodes")
}
