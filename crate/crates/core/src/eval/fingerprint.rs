use crate::molgraph::Molecule;

pub const DEFAULT_WIDTH: usize = 1024;
pub const DEFAULT_RADIUS: usize = 2;

/// Fixed-width bit set of hashed circular atom environments.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    width: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(width: usize) -> Self {
        Self { width, words: vec![0; width.div_ceil(64)] }
    }

    pub fn from_bits(width: usize, bits: impl IntoIterator<Item = usize>) -> Self {
        let mut f = Self::empty(width);
        for b in bits {
            f.set(b % width);
        }
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn contains(&self, bit: usize) -> bool {
        bit < self.width && self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn bits(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|&b| self.contains(b))
    }
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn combine(h: u64, v: u64) -> u64 {
    mix64(h ^ v.wrapping_mul(0x100_0000_01b3))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn fingerprint(m: &Molecule) -> Fingerprint {
    fingerprint_with(m, DEFAULT_WIDTH, DEFAULT_RADIUS)
}

/// Every atom contributes its environment hash at each radius `0..=radius`;
/// a radius-`r` hash combines the atom's previous hash with the sorted
/// multiset of `(bond order, neighbor hash)` pairs.
pub fn fingerprint_with(m: &Molecule, width: usize, radius: usize) -> Fingerprint {
    assert!(width > 0, "fingerprint width must be positive");
    let adj = m.adjacency();
    let mut labels: Vec<u64> = m
        .atoms()
        .iter()
        .map(|a| combine(fnv1a(a.element.as_bytes()), a.charge as i64 as u64))
        .collect();
    let mut fp = Fingerprint::empty(width);
    for round in 0..=radius {
        if round > 0 {
            labels = (0..labels.len())
                .map(|i| {
                    let mut env: Vec<(u8, u64)> = adj[i].iter().map(|&(j, o)| (o, labels[j])).collect();
                    env.sort_unstable();
                    env.iter().fold(combine(labels[i], round as u64), |h, &(o, l)| combine(combine(h, o as u64), l))
                })
                .collect();
        }
        for &l in &labels {
            fp.set((l % width as u64) as usize);
        }
    }
    fp
}

/// `|a ∧ b| / |a ∨ b|`, and 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> f64 {
    assert_eq!(a.width, b.width, "fingerprint widths differ");
    let (mut both, mut any) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        both += (x & y).count_ones();
        any += (x | y).count_ones();
    }
    if any == 0 {
        1.0
    } else {
        both as f64 / any as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemio::parse_smiles;

    #[test]
    fn tanimoto_examples() {
        let a = Fingerprint::from_bits(16, [1, 2, 3]);
        let b = Fingerprint::from_bits(16, [2, 3, 4]);
        assert_eq!(tanimoto(&a, &b), 0.5);
        assert_eq!(tanimoto(&a, &a), 1.0);
        assert_eq!(tanimoto(&a, &Fingerprint::from_bits(16, [7, 8])), 0.0);
        assert_eq!(tanimoto(&Fingerprint::empty(16), &Fingerprint::empty(16)), 1.0);
    }

    #[test]
    fn distinguishes_simple_isomers() {
        let a = fingerprint(&parse_smiles("CCO").unwrap());
        let b = fingerprint(&parse_smiles("COC").unwrap());
        assert_ne!(a, b);
        assert_eq!(a, fingerprint(&parse_smiles("OCC").unwrap()));
        assert!(a.count_ones() > 0);
    }
}
