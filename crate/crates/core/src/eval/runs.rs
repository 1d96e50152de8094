use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chemio::{canonical_key, write_smiles, CanonicalKey};
use crate::error::Result;
use crate::model::MoFlow;
use crate::molgraph::Molecule;

use super::metrics::{metrics, MetricsReport};

/// Number of molecules whose exact one-hot encoding decodes (without
/// correction) to an isomorphic molecule.
pub fn reconstruct_count(model: &MoFlow, mols: &[Molecule]) -> Result<usize> {
    let zs: Vec<_> = model.encode_molecules(mols)?.into_iter().map(|e| e.z).collect();
    let back = model.decode(&zs, false)?;
    Ok(mols.iter().zip(&back).filter(|(a, b)| canonical_key(a) == canonical_key(b)).count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub count: usize,
    pub temperature: f64,
    pub seed: u64,
    pub apply_correction: bool,
}

/// SMILES for a decoded molecule; empty or disconnected graphs give an empty line.
pub fn smiles_line(m: &Molecule) -> String {
    write_smiles(m).unwrap_or_default()
}

/// Sample, decode and write `generated.smi`, `metrics.txt` and `metrics.json`
/// into `out`. Output bytes depend only on the model, options and training set.
pub fn generate_to_dir(
    model: &MoFlow,
    opts: &GenerateOptions,
    train: &[Molecule],
    out: &Path,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let zs = model.sample_prior(opts.count, opts.temperature, &mut rng);
    let decoded = model.decode_both(&zs)?;
    let chosen = if opts.apply_correction { &decoded.corrected } else { &decoded.raw };
    let keys: HashSet<CanonicalKey> = train.iter().map(canonical_key).collect();
    let report = metrics(chosen, &keys, model.vocab())?.with_uncorrected(&decoded.raw, model.vocab());
    fs::create_dir_all(out)?;
    let mut text = String::new();
    for m in chosen {
        text.push_str(&smiles_line(m));
        text.push('\n');
    }
    fs::write(out.join("generated.smi"), text)?;
    fs::write(out.join("metrics.txt"), report.to_key_value())?;
    fs::write(out.join("metrics.json"), report.to_json())?;
    Ok(report)
}
