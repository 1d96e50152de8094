//! Valency constraint and post-hoc bond-order correction.

use crate::error::{Error, Result};
use crate::molgraph::{Molecule, VocabularyConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValencyReport {
    /// Total incident bond order per atom.
    pub sums: Vec<u32>,
    /// Valency plus charge allowance per atom (0 for elements without a table entry).
    pub allowances: Vec<u32>,
    pub violations: Vec<usize>,
}

impl ValencyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn valency_sum(m: &Molecule, i: usize) -> Result<u32> {
    if i >= m.num_atoms() {
        return Err(Error::IndexOutOfRange { index: i, len: m.num_atoms() });
    }
    Ok(m.bonds().iter().filter(|b| b.i == i || b.j == i).map(|b| b.order as u32).sum())
}

pub fn valency_report(m: &Molecule, vocab: &VocabularyConfig) -> ValencyReport {
    let mut sums = vec![0u32; m.num_atoms()];
    for b in m.bonds() {
        sums[b.i] += b.order as u32;
        sums[b.j] += b.order as u32;
    }
    let allowances: Vec<u32> = m.atoms().iter().map(|a| vocab.allowance(a).unwrap_or(0)).collect();
    let violations = (0..m.num_atoms()).filter(|&i| sums[i] > allowances[i]).collect();
    ValencyReport { sums, allowances, violations }
}

pub fn satisfies_valency(m: &Molecule, vocab: &VocabularyConfig) -> bool {
    valency_report(m, vocab).is_ok()
}

/// A generated molecule counts as valid when it is nonempty, connected and
/// every atom satisfies its valency allowance.
pub fn is_valid(m: &Molecule, vocab: &VocabularyConfig) -> bool {
    !m.is_empty() && m.is_connected() && satisfies_valency(m, vocab)
}

/// Largest connected component; equal sizes resolve to the component holding
/// the lowest atom index.
pub fn largest_component(m: &Molecule) -> Molecule {
    let comps = m.components();
    let mut best: Option<&Vec<usize>> = None;
    for c in &comps {
        if best.is_none_or(|b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    match best {
        None => Molecule::empty(),
        Some(c) if c.len() == m.num_atoms() => m.clone(),
        Some(c) => m.subgraph(c),
    }
}

/// Repeatedly remove one unit of bond order from the highest-order bond of the
/// first over-valent atom, then keep the largest connected component.
pub fn correct(m: &Molecule, vocab: &VocabularyConfig) -> Molecule {
    correct_traced(m, vocab).0
}

/// [`correct`] plus the number of decrement iterations it took.
pub fn correct_traced(m: &Molecule, vocab: &VocabularyConfig) -> (Molecule, usize) {
    let mut mol = m.clone();
    let mut steps = 0;
    loop {
        let report = valency_report(&mol, vocab);
        let Some(&atom) = report.violations.first() else {
            return (largest_component(&mol), steps);
        };
        // neighbors() is ascending by partner, so the first maximum is the lowest partner
        let nbrs = mol.neighbors(atom);
        let &(partner, order) = nbrs
            .iter()
            .fold(None::<&(usize, u8)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            })
            .expect("an over-valent atom has at least one bond");
        mol.set_bond_order(atom, partner, order - 1).expect("bond exists");
        steps += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::Atom;

    fn vocab() -> VocabularyConfig {
        VocabularyConfig::qm9()
    }

    fn mol(atoms: &[(&str, i8)], bonds: &[(usize, usize, u8)]) -> Molecule {
        Molecule::new(atoms.iter().map(|(e, c)| Atom::new(*e, *c)).collect(), bonds.iter().copied()).unwrap()
    }

    #[test]
    fn double_bond_sum() {
        let m = mol(&[("C", 0), ("O", 0)], &[(0, 1, 2)]);
        assert_eq!(valency_sum(&m, 0).unwrap(), 2);
        assert!(valency_sum(&m, 2).is_err());
    }

    #[test]
    fn ammonium_gets_extra_bond() {
        let m = mol(&[("N", 1), ("C", 0), ("C", 0), ("C", 0), ("C", 0)], &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)]);
        let r = valency_report(&m, &vocab());
        assert_eq!(r.sums[0], 4);
        assert_eq!(r.allowances[0], 4);
        assert!(r.is_ok());
        let neutral = mol(&[("N", 0), ("C", 0), ("C", 0), ("C", 0), ("C", 0)], &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)]);
        assert_eq!(valency_report(&neutral, &vocab()).violations, vec![0]);
    }

    #[test]
    fn carbon_limit() {
        let mut m = mol(&[("C", 0), ("C", 0), ("C", 0), ("C", 0), ("C", 0)], &[(0, 1, 1), (0, 2, 1), (0, 3, 2)]);
        assert_eq!(valency_sum(&m, 0).unwrap(), 4);
        assert!(satisfies_valency(&m, &vocab()));
        m.add_bond(0, 4, 1).unwrap();
        assert_eq!(valency_sum(&m, 0).unwrap(), 5);
        assert_eq!(valency_report(&m, &vocab()).violations, vec![0]);
    }

    #[test]
    fn valid_connected_is_unchanged() {
        let m = mol(&[("C", 0), ("C", 0), ("O", 0)], &[(0, 1, 1), (1, 2, 1)]);
        assert_eq!(correct(&m, &vocab()), m);
    }

    #[test]
    fn triple_reduced_to_double() {
        // C0 with a triple to C1 and a double to C2: sum 5
        let m = mol(&[("C", 0), ("C", 0), ("C", 0)], &[(0, 1, 3), (0, 2, 2)]);
        let (out, steps) = correct_traced(&m, &vocab());
        assert_eq!(steps, 1);
        assert_eq!(out.bond_order(0, 1), Some(2));
        assert_eq!(out.bond_order(0, 2), Some(2));
        assert!(satisfies_valency(&out, &vocab()));
    }

    #[test]
    fn two_components_keep_larger() {
        let m = mol(&[("C", 0), ("O", 0), ("C", 0), ("C", 0), ("N", 0)], &[(0, 1, 1), (2, 3, 1), (3, 4, 1)]);
        let out = correct(&m, &vocab());
        assert_eq!(out, mol(&[("C", 0), ("C", 0), ("N", 0)], &[(0, 1, 1), (1, 2, 1)]));
    }

    #[test]
    fn equal_components_prefer_atom_zero() {
        let m = mol(&[("C", 0), ("N", 0), ("O", 0), ("F", 0)], &[(0, 2, 1), (1, 3, 1)]);
        let out = largest_component(&m);
        assert_eq!(out, mol(&[("C", 0), ("O", 0)], &[(0, 1, 1)]));
    }

    #[test]
    fn chain_plus_isolated_atom() {
        let m = mol(&[("C", 0), ("C", 0), ("C", 0), ("O", 0)], &[(0, 1, 1), (1, 2, 1)]);
        assert_eq!(largest_component(&m), mol(&[("C", 0), ("C", 0), ("C", 0)], &[(0, 1, 1), (1, 2, 1)]));
        assert_eq!(largest_component(&Molecule::empty()), Molecule::empty());
    }

    #[test]
    fn validity_requires_nonempty_and_connected() {
        assert!(!is_valid(&Molecule::empty(), &vocab()));
        assert!(!is_valid(&mol(&[("C", 0), ("C", 0)], &[]), &vocab()));
        assert!(is_valid(&mol(&[("C", 0)], &[]), &vocab()));
    }
}
