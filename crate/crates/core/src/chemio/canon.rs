//! Canonical isomorphism-class keys via color refinement and
//! individualization with lexicographic minimization.

use std::collections::BTreeMap;

use crate::molgraph::Molecule;

/// Byte string identifying a molecule's isomorphism class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalKey(Vec<u8>);

impl CanonicalKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

struct Component {
    labels: Vec<String>,
    adj: Vec<Vec<(usize, u8)>>,
}

/// Assign dense ranks to `sigs`, equal signatures sharing a rank.
fn rank<T: Ord + Clone>(sigs: &[T]) -> Vec<usize> {
    let mut sorted: Vec<T> = sigs.to_vec();
    sorted.sort();
    sorted.dedup();
    sigs.iter().map(|s| sorted.binary_search(s).expect("present")).collect()
}

fn num_cells(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

impl Component {
    fn initial_colors(&self) -> Vec<usize> {
        let sigs: Vec<(String, usize, Vec<u8>)> = (0..self.labels.len())
            .map(|v| {
                let mut orders: Vec<u8> = self.adj[v].iter().map(|&(_, o)| o).collect();
                orders.sort_unstable();
                (self.labels[v].clone(), self.adj[v].len(), orders)
            })
            .collect();
        rank(&sigs)
    }

    /// Split cells by neighbor color multisets until stable. Cell order is
    /// preserved because each signature leads with the current color.
    fn refine(&self, mut colors: Vec<usize>) -> Vec<usize> {
        let mut cells = num_cells(&colors);
        loop {
            let sigs: Vec<(usize, Vec<(u8, usize)>)> = (0..colors.len())
                .map(|v| {
                    let mut nb: Vec<(u8, usize)> = self.adj[v].iter().map(|&(u, o)| (o, colors[u])).collect();
                    nb.sort_unstable();
                    (colors[v], nb)
                })
                .collect();
            let next = rank(&sigs);
            let next_cells = num_cells(&next);
            colors = next;
            if next_cells == cells {
                return colors;
            }
            cells = next_cells;
        }
    }

    fn certificate(&self, colors: &[usize]) -> Vec<u8> {
        let n = colors.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&v| colors[v]);
        let mut out = Vec::new();
        for &v in &order {
            out.extend_from_slice(self.labels[v].as_bytes());
            out.push(0);
        }
        out.push(0xff);
        let mut bonds: Vec<(usize, usize, u8)> = Vec::new();
        for v in 0..n {
            for &(u, o) in &self.adj[v] {
                let (a, b) = (colors[v], colors[u]);
                if a < b {
                    bonds.push((a, b, o));
                }
            }
        }
        bonds.sort_unstable();
        for (a, b, o) in bonds {
            out.extend_from_slice(&(a as u16).to_le_bytes());
            out.extend_from_slice(&(b as u16).to_le_bytes());
            out.push(o);
        }
        out
    }

    /// `u` and `v` are interchangeable when their neighborhoods (excluding
    /// each other) coincide with identical bond orders.
    fn twins(&self, u: usize, v: usize) -> bool {
        let strip = |x: usize, other: usize| {
            let mut nb: Vec<(usize, u8)> = self.adj[x].iter().copied().filter(|&(w, _)| w != other).collect();
            nb.sort_unstable();
            nb
        };
        let bu = self.adj[u].iter().find(|&&(w, _)| w == v).map(|&(_, o)| o);
        let bv = self.adj[v].iter().find(|&&(w, _)| w == u).map(|&(_, o)| o);
        bu == bv && strip(u, v) == strip(v, u)
    }

    fn search(&self, colors: Vec<usize>, best: &mut Option<Vec<u8>>) {
        let n = colors.len();
        let mut counts = vec![0usize; n];
        for &c in &colors {
            counts[c] += 1;
        }
        let Some(target) = (0..n).find(|&c| counts[c] > 1) else {
            let cert = self.certificate(&colors);
            if best.as_ref().is_none_or(|b| cert < *b) {
                *best = Some(cert);
            }
            return;
        };
        let cell: Vec<usize> = (0..n).filter(|&v| colors[v] == target).collect();
        let mut tried: Vec<usize> = Vec::new();
        for &v in &cell {
            if tried.iter().any(|&t| self.twins(t, v)) {
                continue;
            }
            tried.push(v);
            let mut next: Vec<usize> = colors.iter().map(|&c| 2 * c + 1).collect();
            next[v] = 2 * colors[v];
            let next = rank(&next);
            self.search(self.refine(next), best);
        }
    }

    fn key(&self) -> Vec<u8> {
        let colors = self.refine(self.initial_colors());
        let mut best = None;
        self.search(colors, &mut best);
        best.unwrap_or_default()
    }
}

/// Canonical key: invariant under atom permutation and distinct for
/// non-isomorphic molecules. Disconnected inputs are keyed by the sorted
/// multiset of component certificates.
pub fn canonical_key(m: &Molecule) -> CanonicalKey {
    let adj = m.adjacency();
    let mut certs: Vec<Vec<u8>> = m
        .components()
        .into_iter()
        .map(|comp| {
            let local: BTreeMap<usize, usize> = comp.iter().enumerate().map(|(k, &v)| (v, k)).collect();
            let component = Component {
                labels: comp.iter().map(|&v| m.atoms()[v].species()).collect(),
                adj: comp.iter().map(|&v| adj[v].iter().map(|&(u, o)| (local[&u], o)).collect()).collect(),
            };
            component.key()
        })
        .collect();
    certs.sort();
    let mut out = Vec::new();
    for c in certs {
        out.extend_from_slice(&(c.len() as u32).to_le_bytes());
        out.extend_from_slice(&c);
    }
    CanonicalKey(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemio::parse_smiles;

    fn key(s: &str) -> CanonicalKey {
        canonical_key(&parse_smiles(s).unwrap())
    }

    #[test]
    fn spec_examples() {
        assert_eq!(key("CCO"), key("OCC"));
        assert_ne!(key("CCO"), key("CC=O"));
        let m = parse_smiles("CC(=O)N").unwrap();
        let rev: Vec<usize> = (0..m.num_atoms()).rev().collect();
        assert_eq!(canonical_key(&m), canonical_key(&m.permute(&rev)));
    }

    #[test]
    fn symmetric_graphs() {
        assert_eq!(key("C1CCCCC1"), key("C1CCCCC1"));
        assert_ne!(key("C1CCCCC1"), key("C1CCC1CC"));
        // norbornane vs bicyclo[3.1.1]heptane: same atom and bond counts
        assert_ne!(key("C1CC2CCC1C2"), key("C1C2CC(C2)CC1"));
        assert_eq!(key("C1=CC=CC=C1"), key("C=1C=CC=CC=1"));
    }

    #[test]
    fn components_are_order_independent() {
        use crate::molgraph::{Atom, Molecule};
        let a = Molecule::new(vec![Atom::neutral("C"), Atom::neutral("O"), Atom::neutral("N")], [(0, 1, 1)]).unwrap();
        let b = Molecule::new(vec![Atom::neutral("N"), Atom::neutral("O"), Atom::neutral("C")], [(1, 2, 1)]).unwrap();
        assert_eq!(canonical_key(&a), canonical_key(&b));
        assert_eq!(canonical_key(&Molecule::empty()), canonical_key(&Molecule::empty()));
    }
}
