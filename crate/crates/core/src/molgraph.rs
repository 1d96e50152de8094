//! Discrete molecular graphs and their one-hot tensor encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of real bond orders (single, double, triple).
pub const BOND_ORDERS: usize = 3;
/// Bond channels including the trailing virtual "no bond" channel.
pub const BOND_CHANNELS: usize = BOND_ORDERS + 1;
pub const VIRTUAL_BOND: usize = BOND_ORDERS;
/// Upper end of the half-open dequantization interval.
pub const DEQUANT_NOISE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub element: String,
    pub charge: i8,
}

impl Atom {
    pub fn new(element: impl Into<String>, charge: i8) -> Self {
        Self { element: element.into(), charge }
    }

    pub fn neutral(element: impl Into<String>) -> Self {
        Self::new(element, 0)
    }

    /// Vocabulary label such as `C`, `N+` or `O-`.
    pub fn species(&self) -> String {
        match self.charge {
            0 => self.element.clone(),
            1 => format!("{}+", self.element),
            -1 => format!("{}-", self.element),
            c if c > 0 => format!("{}+{}", self.element, c),
            c => format!("{}-{}", self.element, -c),
        }
    }

    /// Parse a vocabulary label produced by [`Atom::species`].
    pub fn from_species(label: &str) -> Result<Self> {
        let split = label.find(['+', '-']).unwrap_or(label.len());
        let (el, rest) = label.split_at(split);
        if el.is_empty() || !el.chars().next().unwrap().is_ascii_uppercase() {
            return Err(Error::Vocabulary(label.to_string()));
        }
        let charge = match rest {
            "" => 0,
            "+" => 1,
            "-" => -1,
            s => {
                let mag: i8 = s[1..].parse().map_err(|_| Error::Vocabulary(label.to_string()))?;
                if s.starts_with('+') { mag } else { -mag }
            }
        };
        Ok(Self::new(el, charge))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

/// Hydrogen-suppressed, kekulized molecular graph.
///
/// Bonds are stored with `i < j`, sorted, at most one per atom pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Molecule {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

impl Molecule {
    pub fn new(atoms: Vec<Atom>, bonds: impl IntoIterator<Item = (usize, usize, u8)>) -> Result<Self> {
        let mut m = Self { atoms, bonds: Vec::new() };
        for (i, j, order) in bonds {
            m.add_bond(i, j, order)?;
        }
        Ok(m)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn add_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, i: usize, j: usize, order: u8) -> Result<()> {
        let n = self.atoms.len();
        for idx in [i, j] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, len: n });
            }
        }
        if i == j {
            return Err(Error::Config(format!("self-bond on atom {i}")));
        }
        if !(1..=3).contains(&order) {
            return Err(Error::Config(format!("bond order {order} outside 1..=3")));
        }
        let (i, j) = (i.min(j), i.max(j));
        match self.bonds.binary_search_by(|b| (b.i, b.j).cmp(&(i, j))) {
            Ok(_) => Err(Error::Config(format!("duplicate bond {i}-{j}"))),
            Err(pos) => {
                self.bonds.insert(pos, Bond { i, j, order });
                Ok(())
            }
        }
    }

    fn bond_pos(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = (i.min(j), i.max(j));
        self.bonds.binary_search_by(|b| (b.i, b.j).cmp(&(i, j))).ok()
    }

    pub fn bond_order(&self, i: usize, j: usize) -> Option<u8> {
        self.bond_pos(i, j).map(|p| self.bonds[p].order)
    }

    /// Set the order of an existing bond; order 0 removes it.
    pub fn set_bond_order(&mut self, i: usize, j: usize, order: u8) -> Result<()> {
        let pos = self
            .bond_pos(i, j)
            .ok_or_else(|| Error::Config(format!("no bond between {i} and {j}")))?;
        if order == 0 {
            self.bonds.remove(pos);
        } else {
            self.bonds[pos].order = order;
        }
        Ok(())
    }

    /// `(neighbor, order)` pairs for atom `i`, ascending by neighbor.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, u8)> {
        let mut out: Vec<(usize, u8)> = self
            .bonds
            .iter()
            .filter_map(|b| {
                if b.i == i {
                    Some((b.j, b.order))
                } else if b.j == i {
                    Some((b.i, b.order))
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.i].push((b.j, b.order));
            adj[b.j].push((b.i, b.order));
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Connected components as ascending atom-index lists, ordered by lowest index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.atoms.len()];
        let mut comps = Vec::new();
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut comp = Vec::new();
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Induced subgraph on `keep` (ascending order preserved).
    pub fn subgraph(&self, keep: &[usize]) -> Molecule {
        let mut map = vec![usize::MAX; self.atoms.len()];
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let atoms = sorted
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                map[old] = new;
                self.atoms[old].clone()
            })
            .collect();
        let bonds = self
            .bonds
            .iter()
            .filter(|b| map[b.i] != usize::MAX && map[b.j] != usize::MAX)
            .map(|b| Bond { i: map[b.i], j: map[b.j], order: b.order })
            .collect::<Vec<_>>();
        let mut m = Molecule { atoms, bonds };
        m.bonds.sort_unstable();
        m
    }

    /// Relabel atoms: atom `k` moves to position `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Molecule {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = vec![Atom::neutral("X"); self.atoms.len()];
        for (k, &p) in perm.iter().enumerate() {
            atoms[p] = self.atoms[k].clone();
        }
        let mut bonds: Vec<Bond> = self
            .bonds
            .iter()
            .map(|b| {
                let (x, y) = (perm[b.i], perm[b.j]);
                Bond { i: x.min(y), j: x.max(y), order: b.order }
            })
            .collect();
        bonds.sort_unstable();
        Molecule { atoms, bonds }
    }

    pub fn total_bond_order(&self) -> usize {
        self.bonds.iter().map(|b| b.order as usize).sum()
    }
}

impl fmt::Display for Molecule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let atoms: Vec<String> = self.atoms.iter().map(Atom::species).collect();
        write!(f, "[{}]", atoms.join(","))?;
        for b in &self.bonds {
            write!(f, " {}-{}:{}", b.i, b.j, b.order)?;
        }
        Ok(())
    }
}

/// Atom vocabulary, capacity and valency rules shared by encoding and validity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyConfig {
    /// Ordered atom types (species labels, e.g. `C`, `N+`); the virtual type is implicit and last.
    pub atom_types: Vec<String>,
    pub n_max: usize,
    /// Element → maximum total bond order.
    pub valency: BTreeMap<String, u32>,
    /// Charged species granted one extra unit of valency.
    pub charged_extra: Vec<String>,
}

impl VocabularyConfig {
    pub fn qm9() -> Self {
        Self {
            atom_types: ["C", "N", "O", "F"].map(String::from).to_vec(),
            n_max: 9,
            valency: default_valency(),
            charged_extra: default_charged_extra(),
        }
    }

    pub fn zinc250k() -> Self {
        Self {
            atom_types: ["C", "N", "O", "F", "P", "S", "Cl", "Br", "I"].map(String::from).to_vec(),
            n_max: 38,
            valency: default_valency(),
            charged_extra: default_charged_extra(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(Error::Config("vocab.n_max must be >= 1".into()));
        }
        if self.atom_types.is_empty() {
            return Err(Error::Config("vocab.atom_types is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.atom_types {
            let atom = Atom::from_species(t).map_err(|_| Error::Config(format!("vocab.atom_types: bad label `{t}`")))?;
            if !self.valency.contains_key(&atom.element) {
                return Err(Error::Config(format!("vocab.valency: no entry for `{}`", atom.element)));
            }
            if !seen.insert(t.clone()) {
                return Err(Error::Config(format!("vocab.atom_types: duplicate `{t}`")));
            }
        }
        for c in &self.charged_extra {
            Atom::from_species(c).map_err(|_| Error::Config(format!("vocab.charged_extra: bad label `{c}`")))?;
        }
        Ok(())
    }

    /// Atom types including the virtual type.
    pub fn num_atom_channels(&self) -> usize {
        self.atom_types.len() + 1
    }

    pub fn virtual_atom(&self) -> usize {
        self.atom_types.len()
    }

    pub fn type_index(&self, atom: &Atom) -> Option<usize> {
        let label = atom.species();
        self.atom_types.iter().position(|t| *t == label)
    }

    /// Valency allowance: table value plus one for listed charged species.
    pub fn allowance(&self, atom: &Atom) -> Option<u32> {
        let base = *self.valency.get(&atom.element)?;
        let extra = self.charged_extra.iter().any(|c| *c == atom.species());
        Some(base + extra as u32)
    }
}

pub fn default_valency() -> BTreeMap<String, u32> {
    [("C", 4), ("N", 3), ("O", 2), ("F", 1), ("P", 5), ("S", 6), ("Cl", 1), ("Br", 1), ("I", 1)]
        .into_iter()
        .map(|(e, v)| (e.to_string(), v))
        .collect()
}

pub fn default_charged_extra() -> Vec<String> {
    ["N+", "S+", "O+"].map(String::from).to_vec()
}

/// Continuous atom matrix `[n_max, k]` and bond tensor `[c, n_max, n_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTensorPair {
    pub atoms: Tensor,
    pub bonds: Tensor,
    pub n_actual: usize,
}

impl GraphTensorPair {
    pub fn n_max(&self) -> usize {
        self.atoms.shape()[0]
    }
}

/// One-hot encode with virtual-atom padding and a virtual no-bond channel.
pub fn encode_onehot(m: &Molecule, v: &VocabularyConfig) -> Result<GraphTensorPair> {
    let n = v.n_max;
    if m.num_atoms() > n {
        return Err(Error::Capacity { atoms: m.num_atoms(), capacity: n });
    }
    let k = v.num_atom_channels();
    let mut atoms = Tensor::zeros(&[n, k]);
    for row in 0..n {
        let t = match m.atoms().get(row) {
            Some(a) => v.type_index(a).ok_or_else(|| Error::Vocabulary(a.species()))?,
            None => v.virtual_atom(),
        };
        atoms.set(&[row, t], 1.0);
    }
    let mut bonds = Tensor::zeros(&[BOND_CHANNELS, n, n]);
    for i in 0..n {
        for j in 0..n {
            bonds.set(&[VIRTUAL_BOND, i, j], 1.0);
        }
    }
    for b in m.bonds() {
        let ch = b.order as usize - 1;
        for (x, y) in [(b.i, b.j), (b.j, b.i)] {
            bonds.set(&[VIRTUAL_BOND, x, y], 0.0);
            bonds.set(&[ch, x, y], 1.0);
        }
    }
    Ok(GraphTensorPair { atoms, bonds, n_actual: m.num_atoms() })
}

/// Add independent `U[0, 0.6)` noise to every entry.
pub fn dequantize<R: Rng + ?Sized>(t: &GraphTensorPair, rng: &mut R) -> GraphTensorPair {
    let mut noisy = |x: &Tensor| {
        let mut out = x.clone();
        for e in out.data_mut() {
            *e += rng.random_range(0.0..DEQUANT_NOISE);
        }
        out
    };
    GraphTensorPair { atoms: noisy(&t.atoms), bonds: noisy(&t.bonds), n_actual: t.n_actual }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Resolve a `[c, n, n]` bond tensor to one channel per atom pair after
/// symmetrizing `(B + Bᵀ)/2`. The diagonal is always virtual.
pub fn resolve_bond_channels(b: &[f64], c: usize, n: usize) -> Vec<usize> {
    assert_eq!(b.len(), c * n * n);
    let mut out = vec![c - 1; n * n];
    let mut fiber = vec![0.0; c];
    for i in 0..n {
        for j in (i + 1)..n {
            for (l, f) in fiber.iter_mut().enumerate() {
                *f = 0.5 * (b[(l * n + i) * n + j] + b[(l * n + j) * n + i]);
            }
            let ch = argmax(&fiber);
            out[i * n + j] = ch;
            out[j * n + i] = ch;
        }
    }
    out
}

/// Argmax decoding back to a molecule; virtual atoms and bonds are dropped.
pub fn discretize(t: &GraphTensorPair, v: &VocabularyConfig) -> Molecule {
    let n = t.atoms.shape()[0];
    let k = t.atoms.shape()[1];
    let c = t.bonds.shape()[0];
    let mut row_to_atom = vec![usize::MAX; n];
    let mut m = Molecule::empty();
    for row in 0..n {
        let ty = argmax(&t.atoms.data()[row * k..(row + 1) * k]);
        if ty < v.atom_types.len() {
            let atom = Atom::from_species(&v.atom_types[ty]).expect("validated vocabulary");
            row_to_atom[row] = m.add_atom(atom);
        }
    }
    let channels = resolve_bond_channels(t.bonds.data(), c, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let ch = channels[i * n + j];
            if ch < c - 1 && row_to_atom[i] != usize::MAX && row_to_atom[j] != usize::MAX {
                m.add_bond(row_to_atom[i], row_to_atom[j], ch as u8 + 1).expect("fresh pair");
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ethane() -> Molecule {
        Molecule::new(vec![Atom::neutral("C"), Atom::neutral("C")], [(0, 1, 1)]).unwrap()
    }

    #[test]
    fn qm9_shapes() {
        let t = encode_onehot(&ethane(), &VocabularyConfig::qm9()).unwrap();
        assert_eq!(t.atoms.shape(), &[9, 5]);
        assert_eq!(t.bonds.shape(), &[4, 9, 9]);
    }

    #[test]
    fn empty_molecule_is_pure_padding() {
        let v = VocabularyConfig::qm9();
        let t = encode_onehot(&Molecule::empty(), &v).unwrap();
        for row in 0..9 {
            assert_eq!(t.atoms.get(&[row, 4]), 1.0);
        }
        assert_eq!(t.bonds.data()[3 * 81..].iter().sum::<f64>(), 81.0);
        assert_eq!(t.bonds.data()[..3 * 81].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn ethane_channel_counts() {
        let t = encode_onehot(&ethane(), &VocabularyConfig::qm9()).unwrap();
        let channel_sum = |l: usize| t.bonds.data()[l * 81..(l + 1) * 81].iter().sum::<f64>();
        assert_eq!(channel_sum(0), 2.0);
        assert_eq!(t.bonds.get(&[0, 0, 1]), 1.0);
        assert_eq!(t.bonds.get(&[0, 1, 0]), 1.0);
        assert_eq!(channel_sum(1), 0.0);
        assert_eq!(channel_sum(2), 0.0);
        assert_eq!(channel_sum(3), 79.0);
    }

    #[test]
    fn capacity_and_vocabulary_errors() {
        let v = VocabularyConfig::qm9();
        let big = Molecule::new(vec![Atom::neutral("C"); 10], []).unwrap();
        assert!(matches!(encode_onehot(&big, &v), Err(Error::Capacity { atoms: 10, capacity: 9 })));
        let s = Molecule::new(vec![Atom::neutral("S")], []).unwrap();
        assert!(matches!(encode_onehot(&s, &v), Err(Error::Vocabulary(_))));
        let charged = Molecule::new(vec![Atom::new("N", 1)], []).unwrap();
        assert!(matches!(encode_onehot(&charged, &v), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn dequantize_range_and_determinism() {
        let t = encode_onehot(&ethane(), &VocabularyConfig::qm9()).unwrap();
        let a = dequantize(&t, &mut ChaCha8Rng::seed_from_u64(7));
        let b = dequantize(&t, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        for (x, y) in t.atoms.data().iter().zip(a.atoms.data()) {
            assert!(*y >= *x && *y < *x + DEQUANT_NOISE);
        }
        assert!(a.atoms.get(&[0, 0]) >= 1.0 && a.atoms.get(&[0, 0]) < 1.6);
    }

    #[test]
    fn all_virtual_tensor_decodes_empty() {
        let v = VocabularyConfig::qm9();
        let t = encode_onehot(&Molecule::empty(), &v).unwrap();
        assert!(discretize(&t, &v).is_empty());
    }

    #[test]
    fn asymmetric_bond_is_symmetrized_before_argmax() {
        let v = VocabularyConfig::qm9();
        let m = Molecule::new(vec![Atom::neutral("C"), Atom::neutral("C")], []).unwrap();
        let mut t = encode_onehot(&m, &v).unwrap();
        t.bonds.set(&[0, 0, 1], 0.9);
        t.bonds.set(&[0, 1, 0], 0.1);
        t.bonds.set(&[VIRTUAL_BOND, 0, 1], 0.4);
        t.bonds.set(&[VIRTUAL_BOND, 1, 0], 0.4);
        let d = discretize(&t, &v);
        assert_eq!(d.bond_order(0, 1), Some(1));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn species_labels_round_trip() {
        for (label, el, ch) in [("C", "C", 0), ("N+", "N", 1), ("O-", "O", -1), ("Cl", "Cl", 0), ("S+2", "S", 2)] {
            let a = Atom::from_species(label).unwrap();
            assert_eq!((a.element.as_str(), a.charge), (el, ch));
            assert_eq!(a.species(), label);
        }
        assert!(Atom::from_species("+").is_err());
    }

    #[test]
    fn bond_bookkeeping() {
        let mut m = ethane();
        assert!(m.add_bond(1, 0, 2).is_err());
        assert!(m.add_bond(0, 0, 1).is_err());
        assert!(m.add_bond(0, 5, 1).is_err());
        m.set_bond_order(1, 0, 0).unwrap();
        assert!(m.bonds().is_empty());
        assert_eq!(m.components().len(), 2);
    }
}
