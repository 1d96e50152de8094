//! Kekulized SMILES subset: organic-subset and bracket atoms, `- = #` bonds,
//! branches and single-digit ring closures.

use crate::error::{Error, Result};
use crate::molgraph::{Atom, Molecule};

const ORGANIC: &[&str] = &["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];

const ELEMENTS: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Ti", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Ag", "Cd",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "Pt", "Au", "Hg", "Pb", "Bi",
];

/// Lexical unit of the supported grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SmilesToken {
    Atom { element: String },
    BracketAtom { element: String, hydrogens: u8, charge: i8 },
    Bond(u8),
    BranchOpen,
    BranchClose,
    RingClosure(u8),
}

fn unsupported(offset: usize, feature: impl Into<String>) -> Error {
    Error::Unsupported { offset, feature: feature.into() }
}

fn syntax(offset: usize, message: impl Into<String>) -> Error {
    Error::Syntax { offset, message: message.into() }
}

/// Split a SMILES string into tokens with their byte offsets.
pub fn tokenize(s: &str) -> Result<Vec<(usize, SmilesToken)>> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let start = i;
        let ch = b[i] as char;
        let tok = match ch {
            '(' => {
                i += 1;
                SmilesToken::BranchOpen
            }
            ')' => {
                i += 1;
                SmilesToken::BranchClose
            }
            '-' => {
                i += 1;
                SmilesToken::Bond(1)
            }
            '=' => {
                i += 1;
                SmilesToken::Bond(2)
            }
            '#' => {
                i += 1;
                SmilesToken::Bond(3)
            }
            '1'..='9' => {
                i += 1;
                SmilesToken::RingClosure(b[start] - b'0')
            }
            '0' => return Err(syntax(start, "ring closure digit 0")),
            '%' => return Err(unsupported(start, "two-digit ring closure")),
            '.' => return Err(unsupported(start, "multi-fragment '.'")),
            '/' | '\\' => return Err(unsupported(start, "directional bond")),
            ':' => return Err(unsupported(start, "aromatic bond")),
            '$' => return Err(unsupported(start, "quadruple bond")),
            '@' => return Err(unsupported(start, "stereo center")),
            '*' => return Err(unsupported(start, "wildcard atom")),
            'b' | 'c' | 'n' | 'o' | 'p' | 's' => return Err(unsupported(start, "aromatic atom")),
            '[' => {
                let (tok, next) = bracket_atom(s, start)?;
                i = next;
                tok
            }
            'A'..='Z' => {
                let two = s.get(i..i + 2).filter(|t| ORGANIC.contains(t));
                let sym = match two {
                    Some(t) => t,
                    None => {
                        let one = &s[i..i + 1];
                        if !ORGANIC.contains(&one) {
                            return Err(syntax(start, format!("`{one}` outside the organic subset needs brackets")));
                        }
                        one
                    }
                };
                i += sym.len();
                SmilesToken::Atom { element: sym.to_string() }
            }
            c => return Err(syntax(start, format!("unexpected character `{c}`"))),
        };
        out.push((start, tok));
    }
    Ok(out)
}

fn bracket_atom(s: &str, open: usize) -> Result<(SmilesToken, usize)> {
    let b = s.as_bytes();
    let close = s[open..].find(']').map(|p| open + p).ok_or_else(|| syntax(open, "unterminated bracket atom"))?;
    let mut i = open + 1;
    if i < close && b[i].is_ascii_digit() {
        return Err(unsupported(i, "isotope"));
    }
    if i >= close {
        return Err(syntax(open, "empty bracket atom"));
    }
    if b[i].is_ascii_lowercase() {
        return Err(unsupported(i, "aromatic atom"));
    }
    if !b[i].is_ascii_uppercase() {
        return Err(syntax(i, "expected element symbol"));
    }
    let element = match s.get(i..i + 2) {
        Some(t) if i + 2 <= close && ELEMENTS.contains(&t) => t,
        _ => {
            let one = &s[i..i + 1];
            if !ELEMENTS.contains(&one) {
                return Err(syntax(i, format!("unknown element `{one}`")));
            }
            one
        }
    };
    i += element.len();
    if i < close && b[i] == b'@' {
        return Err(unsupported(i, "stereo center"));
    }
    let mut hydrogens = 0u8;
    if i < close && b[i] == b'H' {
        i += 1;
        hydrogens = 1;
        if i < close && b[i].is_ascii_digit() {
            hydrogens = b[i] - b'0';
            i += 1;
        }
    }
    let mut charge = 0i8;
    if i < close && (b[i] == b'+' || b[i] == b'-') {
        let sign: i8 = if b[i] == b'+' { 1 } else { -1 };
        let at = i;
        i += 1;
        let mut mag = 1i8;
        if i < close && b[i] == b[at] {
            return Err(unsupported(at, "charge magnitude above 1"));
        }
        if i < close && b[i].is_ascii_digit() {
            mag = (b[i] - b'0') as i8;
            i += 1;
        }
        if mag > 1 {
            return Err(unsupported(at, "charge magnitude above 1"));
        }
        charge = sign * mag;
    }
    if i < close && b[i] == b':' {
        return Err(unsupported(i, "atom class"));
    }
    if i != close {
        return Err(syntax(i, "unexpected content in bracket atom"));
    }
    Ok((SmilesToken::BracketAtom { element: element.to_string(), hydrogens, charge }, close + 1))
}

/// Parse a kekulized, hydrogen-suppressed SMILES string.
pub fn parse_smiles(s: &str) -> Result<Molecule> {
    let tokens = tokenize(s)?;
    if tokens.is_empty() {
        return Err(syntax(0, "empty SMILES"));
    }
    let mut m = Molecule::empty();
    let mut prev: Option<usize> = None;
    let mut pending: Option<(usize, u8)> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    // digit -> (atom, explicit order, offset)
    let mut rings: [Option<(usize, Option<u8>, usize)>; 10] = Default::default();

    for (off, tok) in tokens {
        match tok {
            SmilesToken::Atom { element } => {
                let a = m.add_atom(Atom::neutral(element));
                if let Some(p) = prev {
                    let order = pending.take().map_or(1, |(_, o)| o);
                    m.add_bond(p, a, order)?;
                } else if let Some((at, _)) = pending {
                    return Err(syntax(at, "bond without a preceding atom"));
                }
                prev = Some(a);
            }
            SmilesToken::BracketAtom { element, charge, .. } => {
                let a = m.add_atom(Atom::new(element, charge));
                if let Some(p) = prev {
                    let order = pending.take().map_or(1, |(_, o)| o);
                    m.add_bond(p, a, order)?;
                } else if let Some((at, _)) = pending {
                    return Err(syntax(at, "bond without a preceding atom"));
                }
                prev = Some(a);
            }
            SmilesToken::Bond(o) => {
                if pending.is_some() {
                    return Err(syntax(off, "two consecutive bond symbols"));
                }
                if prev.is_none() {
                    return Err(syntax(off, "bond without a preceding atom"));
                }
                pending = Some((off, o));
            }
            SmilesToken::BranchOpen => {
                let p = prev.ok_or_else(|| syntax(off, "branch without a preceding atom"))?;
                if pending.is_some() {
                    return Err(syntax(off, "bond symbol before branch"));
                }
                branches.push((p, off));
            }
            SmilesToken::BranchClose => {
                let (p, _) = branches.pop().ok_or_else(|| syntax(off, "unmatched ')'"))?;
                if let Some((at, _)) = pending {
                    return Err(syntax(at, "dangling bond at end of branch"));
                }
                prev = Some(p);
            }
            SmilesToken::RingClosure(d) => {
                let a = prev.ok_or_else(|| syntax(off, "ring closure without a preceding atom"))?;
                let explicit = pending.take().map(|(_, o)| o);
                match rings[d as usize].take() {
                    None => rings[d as usize] = Some((a, explicit, off)),
                    Some((other, first, _)) => {
                        let order = match (first, explicit) {
                            (Some(x), Some(y)) if x != y => {
                                return Err(syntax(off, format!("ring {d} has conflicting bond orders")))
                            }
                            (Some(x), _) | (None, Some(x)) => x,
                            (None, None) => 1,
                        };
                        if other == a {
                            return Err(syntax(off, format!("ring {d} closes on its own atom")));
                        }
                        if m.bond_order(other, a).is_some() {
                            return Err(syntax(off, format!("ring {d} duplicates an existing bond")));
                        }
                        m.add_bond(other, a, order)?;
                    }
                }
            }
        }
    }
    if let Some((at, _)) = pending {
        return Err(syntax(at, "dangling bond at end of input"));
    }
    if let Some(&(_, at)) = branches.last() {
        return Err(syntax(at, "unclosed branch"));
    }
    if let Some((d, (_, _, at))) = rings.iter().enumerate().find_map(|(d, r)| r.map(|r| (d, r))) {
        return Err(Error::UnmatchedRing { digit: d as u8, offset: at });
    }
    Ok(m)
}

fn atom_token(a: &Atom) -> String {
    if a.charge == 0 && ORGANIC.contains(&a.element.as_str()) {
        return a.element.clone();
    }
    let charge = match a.charge {
        0 => String::new(),
        1 => "+".into(),
        -1 => "-".into(),
        c if c > 0 => format!("+{c}"),
        c => format!("-{}", -c),
    };
    format!("[{}{}]", a.element, charge)
}

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

/// Write a connected molecule as SMILES (depth-first from atom 0).
pub fn write_smiles(m: &Molecule) -> Result<String> {
    if m.is_empty() {
        return Err(Error::Empty("cannot write an empty molecule"));
    }
    let comps = m.components().len();
    if comps > 1 {
        return Err(Error::Disconnected { components: comps });
    }
    let adj = m.adjacency();
    let n = m.num_atoms();

    // DFS spanning tree; non-tree edges always join an atom to an ancestor.
    let mut parent = vec![usize::MAX; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![(0usize, usize::MAX)];
    while let Some((u, p)) = stack.pop() {
        if visited[u] {
            continue;
        }
        visited[u] = true;
        parent[u] = p;
        if p != usize::MAX {
            children[p].push(u);
        }
        order.push(u);
        for &(v, _) in adj[u].iter().rev() {
            if !visited[v] {
                stack.push((v, u));
            }
        }
    }
    let is_tree = |u: usize, v: usize| parent[u] == v || parent[v] == u;
    let mut pos = vec![0usize; n];
    for (k, &u) in order.iter().enumerate() {
        pos[u] = k;
    }

    let mut out = String::new();
    let mut open: Vec<Option<(usize, usize)>> = vec![None; 10];
    let mut ring_digit = std::collections::HashMap::new();
    // explicit stack emulating the recursive writer: (atom, next child index)
    enum Step {
        Enter(usize, u8),
        Close,
        Open,
    }
    let mut work = vec![Step::Enter(0, 1)];
    while let Some(step) = work.pop() {
        match step {
            Step::Open => out.push('('),
            Step::Close => out.push(')'),
            Step::Enter(u, order_in) => {
                if parent[u] != usize::MAX {
                    out.push_str(bond_symbol(order_in));
                }
                out.push_str(&atom_token(&m.atoms()[u]));
                // ring bonds touching u, closings first then openings, by partner order
                let mut ring_edges: Vec<(usize, u8)> =
                    adj[u].iter().copied().filter(|&(v, _)| !is_tree(u, v)).collect();
                ring_edges.sort_by_key(|&(v, _)| pos[v]);
                for &(v, o) in &ring_edges {
                    let key = (u.min(v), u.max(v));
                    if pos[v] < pos[u] {
                        let d: usize = ring_digit.remove(&key).expect("opened earlier");
                        open[d] = None;
                        out.push_str(&d.to_string());
                    } else {
                        let d = (1..10)
                            .find(|&d| open[d].is_none())
                            .ok_or_else(|| unsupported(out.len(), "more than 9 open rings"))?;
                        open[d] = Some(key);
                        ring_digit.insert(key, d);
                        out.push_str(bond_symbol(o));
                        out.push_str(&d.to_string());
                    }
                }
                let kids = &children[u];
                // push in reverse so the first child is written first
                for (idx, &c) in kids.iter().enumerate().rev() {
                    let o = m.bond_order(u, c).expect("tree edge");
                    if idx + 1 < kids.len() {
                        work.push(Step::Close);
                        work.push(Step::Enter(c, o));
                        work.push(Step::Open);
                    } else {
                        work.push(Step::Enter(c, o));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Read a dataset: one SMILES per line (first whitespace-separated field);
/// blank lines and lines starting with `#` are skipped.
pub fn read_smiles_lines(text: &str) -> Vec<(usize, &str)> {
    text.lines()
        .enumerate()
        .filter_map(|(no, line)| {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                None
            } else {
                t.split_whitespace().next().map(|s| (no + 1, s))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ethanol() {
        let m = parse_smiles("CCO").unwrap();
        let els: Vec<&str> = m.atoms().iter().map(|a| a.element.as_str()).collect();
        assert_eq!(els, ["C", "C", "O"]);
        assert_eq!(m.bond_order(0, 1), Some(1));
        assert_eq!(m.bond_order(1, 2), Some(1));
        assert_eq!(m.bonds().len(), 2);
    }

    #[test]
    fn ammonium() {
        let m = parse_smiles("[NH4+]").unwrap();
        assert_eq!(m.atoms(), &[Atom::new("N", 1)]);
    }

    #[test]
    fn cyclopropane() {
        let m = parse_smiles("C1CC1").unwrap();
        assert_eq!(m.bonds().len(), 3);
        assert_eq!(m.bond_order(0, 2), Some(1));
    }

    #[test]
    fn ring_bond_order_from_either_end() {
        assert_eq!(parse_smiles("C=1CC1").unwrap().bond_order(0, 2), Some(2));
        assert_eq!(parse_smiles("C1CC=1").unwrap().bond_order(0, 2), Some(2));
        assert!(matches!(parse_smiles("C=1CC#1"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn branches_and_two_letter_atoms() {
        let m = parse_smiles("CC(Cl)(Br)C#N").unwrap();
        assert_eq!(m.num_atoms(), 6);
        assert_eq!(m.neighbors(1).len(), 4);
        assert_eq!(m.bond_order(4, 5), Some(3));
        assert_eq!(m.atoms()[2].element, "Cl");
    }

    #[test]
    fn errors_carry_offsets() {
        assert!(matches!(parse_smiles("c1ccccc1"), Err(Error::Unsupported { offset: 0, .. })));
        assert!(matches!(parse_smiles("C[C@H](O)N"), Err(Error::Unsupported { offset: 3, .. })));
        assert!(matches!(parse_smiles("CC.O"), Err(Error::Unsupported { offset: 2, .. })));
        assert!(matches!(parse_smiles("C1CC"), Err(Error::UnmatchedRing { digit: 1, offset: 1 })));
        assert!(matches!(parse_smiles("CC)"), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(parse_smiles("C(C"), Err(Error::Syntax { offset: 1, .. })));
        assert!(matches!(parse_smiles("CC="), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(parse_smiles("C?"), Err(Error::Syntax { offset: 1, .. })));
        assert!(matches!(parse_smiles("[N++]"), Err(Error::Unsupported { .. })));
        assert!(matches!(parse_smiles("[13C]"), Err(Error::Unsupported { .. })));
        assert!(matches!(parse_smiles(""), Err(Error::Syntax { .. })));
    }

    #[test]
    fn write_simple() {
        let c = parse_smiles("C").unwrap();
        assert_eq!(write_smiles(&c).unwrap(), "C");
        let co = parse_smiles("C=O").unwrap();
        assert!(write_smiles(&co).unwrap().contains('='));
        let charged = parse_smiles("C[N+](C)(C)C").unwrap();
        assert!(write_smiles(&charged).unwrap().contains("[N+]"));
    }

    #[test]
    fn write_rejects_disconnected() {
        let m = Molecule::new(vec![Atom::neutral("C"), Atom::neutral("O")], []).unwrap();
        assert!(matches!(write_smiles(&m), Err(Error::Disconnected { components: 2 })));
        assert!(write_smiles(&Molecule::empty()).is_err());
    }

    #[test]
    fn cyclopropane_round_trip() {
        let m = parse_smiles("C1CC1").unwrap();
        let again = parse_smiles(&write_smiles(&m).unwrap()).unwrap();
        assert_eq!(again.num_atoms(), 3);
        assert_eq!(again.bonds().len(), 3);
    }

    #[test]
    fn dataset_lines() {
        let text = "# smiles\nCCO name\n\nC=O\n";
        assert_eq!(read_smiles_lines(text), vec![(2, "CCO"), (4, "C=O")]);
    }
}
