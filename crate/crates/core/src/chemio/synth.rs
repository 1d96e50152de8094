//! Seeded generator of small QM9-like molecules (C, N, O, F; at most 9 heavy
//! atoms; kekulized; valency-satisfying; connected) for desk-scale runs.

use std::collections::HashSet;

use rand::Rng;

use super::canon::canonical_key;
use crate::error::{Error, Result};
use crate::molgraph::{Atom, Molecule, VocabularyConfig};
use crate::validity::is_valid;

const ELEMENTS: [(&str, u32, f64); 4] = [("C", 4, 0.62), ("N", 3, 0.14), ("O", 2, 0.2), ("F", 1, 0.04)];

fn spare(m: &Molecule, cap: &[u32], i: usize) -> u32 {
    let used: u32 = m.neighbors(i).iter().map(|&(_, o)| o as u32).sum();
    cap[i] - used
}

fn pick_element<R: Rng + ?Sized>(rng: &mut R, elements: &[(&'static str, u32, f64)]) -> (&'static str, u32) {
    let total: f64 = elements.iter().map(|e| e.2).sum();
    let mut r = rng.random_range(0.0..total);
    for &(el, val, w) in elements {
        if r < w {
            return (el, val);
        }
        r -= w;
    }
    ("C", 4)
}

/// One random molecule with `n_min..=n_max` heavy atoms.
pub fn random_molecule<R: Rng + ?Sized>(rng: &mut R, n_min: usize, n_max: usize) -> Molecule {
    random_molecule_from(rng, n_min, n_max, &ELEMENTS)
}

fn random_molecule_from<R: Rng + ?Sized>(
    rng: &mut R,
    n_min: usize,
    n_max: usize,
    elements: &[(&'static str, u32, f64)],
) -> Molecule {
    let n = rng.random_range(n_min..=n_max);
    let mut m = Molecule::empty();
    let mut cap = Vec::with_capacity(n);
    m.add_atom(Atom::neutral("C"));
    cap.push(4);
    while m.num_atoms() < n {
        let open: Vec<usize> = (0..m.num_atoms()).filter(|&i| spare(&m, &cap, i) > 0).collect();
        if open.is_empty() {
            break;
        }
        let parent = open[rng.random_range(0..open.len())];
        let (el, val) = pick_element(rng, elements);
        let child = m.add_atom(Atom::neutral(el));
        cap.push(val);
        m.add_bond(parent, child, 1).expect("fresh atom");
    }
    // ring closures between non-adjacent atoms with spare valency
    let size = m.num_atoms();
    for _ in 0..2 {
        if size < 3 || !rng.random_bool(0.45) {
            continue;
        }
        let i = rng.random_range(0..size);
        let j = rng.random_range(0..size);
        if i != j && m.bond_order(i, j).is_none() && spare(&m, &cap, i) > 0 && spare(&m, &cap, j) > 0 {
            m.add_bond(i, j, 1).expect("checked");
        }
    }
    // unsaturation
    let bonds: Vec<(usize, usize)> = m.bonds().iter().map(|b| (b.i, b.j)).collect();
    for (i, j) in bonds {
        if rng.random_bool(0.18) && spare(&m, &cap, i) > 0 && spare(&m, &cap, j) > 0 {
            let o = m.bond_order(i, j).unwrap();
            let extra = if rng.random_bool(0.2) { 2 } else { 1 };
            let room = spare(&m, &cap, i).min(spare(&m, &cap, j));
            let new = (o as u32 + extra.min(room)).min(3) as u8;
            m.set_bond_order(i, j, new).expect("bond exists");
        }
    }
    m
}

/// `count` pairwise non-isomorphic valid molecules, deterministic in `rng`.
pub fn synthesize_dataset<R: Rng + ?Sized>(rng: &mut R, count: usize, n_max: usize) -> Vec<Molecule> {
    synthesize(rng, count, n_max, &ELEMENTS, &VocabularyConfig::qm9())
}

/// Like [`synthesize_dataset`] but restricted to the elements of `vocab`
/// (which must include carbon) and at most `vocab.n_max` atoms.
pub fn synthesize_for<R: Rng + ?Sized>(rng: &mut R, count: usize, vocab: &VocabularyConfig) -> Result<Vec<Molecule>> {
    let elements: Vec<_> = ELEMENTS.iter().copied().filter(|e| vocab.atom_types.iter().any(|t| t == e.0)).collect();
    if !vocab.atom_types.iter().any(|t| t == "C") {
        return Err(Error::Config("synthetic molecules need carbon in the vocabulary".into()));
    }
    if vocab.n_max == 0 {
        return Err(Error::Config("synthetic molecules need n_max >= 1".into()));
    }
    Ok(synthesize(rng, count, vocab.n_max, &elements, vocab))
}

fn synthesize<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    n_max: usize,
    elements: &[(&'static str, u32, f64)],
    vocab: &VocabularyConfig,
) -> Vec<Molecule> {
    let n_min = 3.min(n_max);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let m = random_molecule_from(rng, n_min, n_max, elements);
        if is_valid(&m, vocab) && seen.insert(canonical_key(&m)) {
            out.push(m);
        }
    }
    out
}
