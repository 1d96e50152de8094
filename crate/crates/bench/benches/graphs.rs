use criterion::{criterion_group, criterion_main, Criterion};
use moflow_bench::molecules;
use moflow_core::chemio::{canonical_key, parse_smiles, write_smiles};
use moflow_core::eval::{fingerprint, tanimoto};
use moflow_core::molgraph::VocabularyConfig;
use moflow_core::validity::correct;

fn graphs(c: &mut Criterion) {
    let mols = molecules(256);
    let smiles: Vec<String> = mols.iter().map(|m| write_smiles(m).unwrap()).collect();
    let vocab = VocabularyConfig::qm9();
    c.bench_function("canonical key x256", |b| b.iter(|| mols.iter().map(canonical_key).collect::<Vec<_>>()));
    c.bench_function("smiles parse x256", |b| {
        b.iter(|| smiles.iter().map(|s| parse_smiles(s).unwrap()).collect::<Vec<_>>())
    });
    c.bench_function("fingerprint+tanimoto x256", |b| {
        let seed = fingerprint(&mols[0]);
        b.iter(|| mols.iter().map(|m| tanimoto(&seed, &fingerprint(m))).sum::<f64>())
    });
    c.bench_function("validity correction x256", |b| {
        b.iter(|| mols.iter().map(|m| correct(m, &vocab)).collect::<Vec<_>>())
    });
}

criterion_group!(benches, graphs);
criterion_main!(benches);
