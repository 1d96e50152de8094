use moflow_core::chemio::canonical_key;
use moflow_core::chemio::synth::synthesize_dataset;
use moflow_core::eval::{grid_neighborhood, grid_steps, interpolate, similarity_to};
use moflow_core::model::{ModelConfig, MoFlow};
use moflow_core::molgraph::VocabularyConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (MoFlow, Vec<moflow_core::molgraph::Molecule>) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = MoFlow::new(ModelConfig::small(VocabularyConfig::qm9(), 2, 3, 8), &mut rng).unwrap();
    (model, synthesize_dataset(&mut rng, 2, 9))
}

#[test]
fn interpolation_starts_and_ends_at_the_inputs() {
    let (model, mols) = setup();
    let zs = model.encode_molecules(&mols).unwrap();
    let path = interpolate(&model, &zs[0].z, &zs[1].z, 6, false).unwrap();
    assert_eq!(path.len(), 6);
    assert_eq!(canonical_key(&path[0]), canonical_key(&mols[0]));
    assert_eq!(canonical_key(&path[5]), canonical_key(&mols[1]));
    assert!(interpolate(&model, &zs[0].z, &zs[1].z, 1, false).is_err());
}

#[test]
fn grid_center_decodes_to_the_seed() {
    let (model, mols) = setup();
    let z = model.encode_molecules(&mols[..1]).unwrap().remove(0).z;
    let steps = grid_steps(1.5, 5);
    assert_eq!(steps[12], (0.0, 0.0));
    let grid = grid_neighborhood(&model, &z, &steps, &mut ChaCha8Rng::seed_from_u64(4), false).unwrap();
    assert_eq!(grid.len(), 25);
    assert_eq!(canonical_key(&grid[12]), canonical_key(&mols[0]));
    let sims = similarity_to(&mols[0], &grid);
    assert_eq!(sims[12], 1.0);
    assert!(sims.iter().all(|s| (0.0..=1.0).contains(s)));
}
