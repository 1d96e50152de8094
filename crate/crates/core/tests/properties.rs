use std::collections::HashSet;

use moflow_core::chemio::synth::random_molecule;
use moflow_core::chemio::{canonical_key, parse_smiles, write_smiles};
use moflow_core::eval::{fingerprint, metrics, tanimoto};
use moflow_core::molgraph::{Molecule, VocabularyConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn molecule(n_max: usize) -> impl Strategy<Value = Molecule> {
    any::<u64>().prop_map(move |s| random_molecule(&mut ChaCha8Rng::seed_from_u64(s), 1, n_max))
}

fn shuffled(m: &Molecule, seed: u64) -> Molecule {
    let mut perm: Vec<usize> = (0..m.num_atoms()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    m.permute(&perm)
}

fn order_matrix(m: &Molecule) -> Vec<Vec<u8>> {
    let n = m.num_atoms();
    let mut a = vec![vec![0u8; n]; n];
    for b in m.bonds() {
        a[b.i][b.j] = b.order;
        a[b.j][b.i] = b.order;
    }
    a
}

/// Exhaustive search over atom bijections.
fn isomorphic(a: &Molecule, b: &Molecule) -> bool {
    fn extend(a: &Molecule, b: &Molecule, ma: &[Vec<u8>], mb: &[Vec<u8>], map: &mut Vec<usize>, used: &mut [bool]) -> bool {
        let k = map.len();
        if k == a.num_atoms() {
            return true;
        }
        for t in 0..b.num_atoms() {
            if used[t] || a.atoms()[k] != b.atoms()[t] {
                continue;
            }
            if (0..k).all(|p| ma[k][p] == mb[t][map[p]]) {
                map.push(t);
                used[t] = true;
                if extend(a, b, ma, mb, map, used) {
                    return true;
                }
                used[t] = false;
                map.pop();
            }
        }
        false
    }
    a.num_atoms() == b.num_atoms()
        && a.bonds().len() == b.bonds().len()
        && extend(a, b, &order_matrix(a), &order_matrix(b), &mut Vec::new(), &mut vec![false; b.num_atoms()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn smiles_round_trip_preserves_graph(m in molecule(9)) {
        let s = write_smiles(&m).unwrap();
        let back = parse_smiles(&s).unwrap();
        prop_assert!(isomorphic(&m, &back), "{s}");
    }

    #[test]
    fn written_smiles_is_a_fixed_point(m in molecule(9)) {
        let s = write_smiles(&m).unwrap();
        let again = write_smiles(&parse_smiles(&s).unwrap()).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn canonical_key_ignores_atom_order(m in molecule(9), seed in any::<u64>()) {
        prop_assert_eq!(canonical_key(&m), canonical_key(&shuffled(&m, seed)));
    }

    #[test]
    fn canonical_key_decides_isomorphism(a in molecule(5), b in molecule(5), seed in any::<u64>()) {
        prop_assert_eq!(canonical_key(&a) == canonical_key(&b), isomorphic(&a, &b));
        let c = shuffled(&a, seed);
        prop_assert!(isomorphic(&a, &c));
        prop_assert_eq!(canonical_key(&a), canonical_key(&c));
    }

    #[test]
    fn fingerprint_ignores_atom_order(m in molecule(9), seed in any::<u64>()) {
        prop_assert_eq!(fingerprint(&m), fingerprint(&shuffled(&m, seed)));
    }

    #[test]
    fn tanimoto_is_a_bounded_symmetric_similarity(a in molecule(9), b in molecule(9)) {
        let (fa, fb) = (fingerprint(&a), fingerprint(&b));
        let s = tanimoto(&fa, &fb);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, tanimoto(&fb, &fa));
        prop_assert_eq!(tanimoto(&fa, &fa), 1.0);
    }

    #[test]
    fn metric_counts_are_consistent(
        gen in prop::collection::vec(prop_oneof![molecule(6), Just(Molecule::empty())], 1..40),
        train in prop::collection::vec(molecule(6), 0..20),
    ) {
        let vocab = VocabularyConfig::qm9();
        let keys: HashSet<_> = train.iter().map(canonical_key).collect();
        let r = metrics(&gen, &keys, &vocab).unwrap();
        prop_assert_eq!(r.total, gen.len());
        prop_assert_eq!(r.validity.den, gen.len());
        prop_assert_eq!(r.validity.num, gen.iter().filter(|m| !m.is_empty()).count());
        prop_assert_eq!(r.uniqueness.den, r.validity.num);
        prop_assert_eq!(r.uniqueness.num, r.uniqueness_of_all.num);
        prop_assert_eq!(r.uniqueness_of_all.den, gen.len());
        prop_assert_eq!(r.novelty.den, r.validity.num);
        prop_assert!(r.nuv.num <= r.uniqueness.num && r.nuv.num <= r.novelty.num);
        prop_assert_eq!(r.nuv.den, gen.len());

        let doubled: Vec<Molecule> = gen.iter().chain(&gen).cloned().collect();
        let d = metrics(&doubled, &keys, &vocab).unwrap();
        prop_assert_eq!(d.uniqueness.num, r.uniqueness.num);
        prop_assert_eq!(d.validity.value(), r.validity.value());
        prop_assert_eq!(d.novelty.value(), r.novelty.value());
    }
}
