//! Valence checks, fragment counting and V2000 molfile / SDF interchange.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::GraphState;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValenceExcess {
    pub node: usize,
    pub bond_order_sum: u32,
    pub max_valence: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub valid: bool,
    pub per_atom_excess: Vec<ValenceExcess>,
    pub fragment_count: usize,
}

/// Valid when no atom's bond-order sum exceeds its maximum valence; any
/// remainder is taken up by implicit hydrogens. Fragments are connected
/// components over bonded pairs and do not affect validity.
pub fn check_validity(g: &GraphState, vocab: &Vocabulary) -> ValidityReport {
    let n = g.n();
    let mut per_atom_excess = Vec::new();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        let mut sum = 0;
        for j in (0..n).filter(|&j| j != i) {
            let order = vocab.bonds.bond_order(g.edge_type(i, j));
            sum += order;
            if order >= 1 && j > i {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
        let max_valence = vocab.atoms.max_valence(g.atom_type(i));
        if sum > max_valence {
            per_atom_excess.push(ValenceExcess { node: i, bond_order_sum: sum, max_valence });
        }
    }
    let fragment_count = (0..n).filter(|&i| find(&mut parent, i) == i).count();
    ValidityReport { valid: per_atom_excess.is_empty(), per_atom_excess, fragment_count }
}

/// Renders a V2000 molblock with zero coordinates.
pub fn write_molfile(g: &GraphState, vocab: &Vocabulary, name: &str) -> Result<String> {
    let n = g.n();
    let bonds = g.bonds();
    if n == 0 {
        return Err(Error::Molfile("molecule has no atoms".into()));
    }
    if n > 999 || bonds.len() > 999 {
        return Err(Error::Molfile(format!("{n} atoms / {} bonds exceed the V2000 limit", bonds.len())));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{name}");
    out.push('\n');
    out.push('\n');
    let _ = writeln!(out, "{:>3}{:>3}  0  0  0  0  0  0  0  0999 V2000", n, bonds.len());
    for i in 0..n {
        let symbol = vocab.atoms.symbol(g.atom_type(i));
        let _ =
            writeln!(out, "{:>10.4}{:>10.4}{:>10.4} {:<3} 0  0  0  0  0  0  0  0  0  0  0  0", 0.0, 0.0, 0.0, symbol);
    }
    for (i, j, k) in bonds {
        let _ = writeln!(out, "{:>3}{:>3}{:>3}  0", i + 1, j + 1, vocab.bonds.bond_order(k));
    }
    out.push_str("M  END\n");
    Ok(out)
}

fn field(line: &str, range: std::ops::Range<usize>) -> Option<&str> {
    line.get(range).map(str::trim)
}

/// Parses a V2000 molblock produced by [`write_molfile`] (or any block using
/// the vocabulary's elements and bond orders).
pub fn read_molfile(text: &str, vocab: &Vocabulary) -> Result<GraphState> {
    let lines: Vec<&str> = text.lines().collect();
    let malformed = |msg: &str| Error::Molfile(msg.to_string());
    let counts = lines.get(3).ok_or_else(|| malformed("missing counts line"))?;
    if !counts.trim_end().ends_with("V2000") {
        return Err(malformed("counts line is not V2000"));
    }
    let parse_count =
        |r| field(counts, r).and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| malformed("malformed counts line"));
    let n = parse_count(0..3)?;
    let m = parse_count(3..6)?;
    if lines.len() < 4 + n + m + 1 {
        return Err(malformed("truncated block"));
    }
    if !lines[4 + n + m..].iter().any(|l| l.trim_end() == "M  END") {
        return Err(malformed("missing `M  END`"));
    }
    let mut atoms = Vec::with_capacity(n);
    for line in &lines[4..4 + n] {
        let symbol = field(line, 31..34)
            .or_else(|| line.split_whitespace().nth(3))
            .ok_or_else(|| malformed("malformed atom line"))?;
        atoms.push(vocab.atoms.index_of(symbol).ok_or_else(|| Error::UnknownAtom(symbol.to_string()))?);
    }
    let mut bonds = Vec::with_capacity(m);
    for line in &lines[4 + n..4 + n + m] {
        let get =
            |r| field(line, r).and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| malformed("malformed bond line"));
        let (i, j, order) = (get(0..3)?, get(3..6)?, get(6..9)?);
        if i == 0 || j == 0 || i > n || j > n || i == j {
            return Err(Error::Molfile(format!("bond ({i}, {j}) out of range for {n} atoms")));
        }
        let k = vocab
            .bonds
            .index_of_order(order as u32)
            .filter(|&k| k != 0)
            .ok_or_else(|| Error::Molfile(format!("unsupported bond order {order}")))?;
        bonds.push((i - 1, j - 1, k));
    }
    GraphState::from_discrete(&atoms, &bonds, vocab.atom_count(), vocab.bond_count())
}

/// Concatenates molblocks with `$$$$` separators.
pub fn write_sdf<'a>(graphs: impl IntoIterator<Item = (&'a GraphState, String)>, vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for (g, name) in graphs {
        out.push_str(&write_molfile(g, vocab, &name)?);
        out.push_str("$$$$\n");
    }
    Ok(out)
}

pub fn read_sdf(text: &str, vocab: &Vocabulary) -> Result<Vec<GraphState>> {
    text.split("$$$$\n").filter(|block| !block.trim().is_empty()).map(|block| read_molfile(block, vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::qm9_heavy_vocab;

    fn graph(atoms: &[usize], bonds: &[(usize, usize, usize)]) -> GraphState {
        GraphState::from_discrete(atoms, bonds, 4, 4).unwrap()
    }

    #[test]
    fn tetravalent_carbon_is_valid() {
        let v = qm9_heavy_vocab();
        let g = graph(&[0, 0, 0, 0, 0], &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)]);
        let r = check_validity(&g, &v);
        assert!(r.valid);
        assert_eq!(r.fragment_count, 1);
    }

    #[test]
    fn double_bonded_fluorine_is_invalid() {
        let v = qm9_heavy_vocab();
        let r = check_validity(&graph(&[3, 0], &[(0, 1, 2)]), &v);
        assert!(!r.valid);
        assert_eq!(r.per_atom_excess, vec![ValenceExcess { node: 0, bond_order_sum: 2, max_valence: 1 }]);
    }

    #[test]
    fn fragments_are_counted_but_valid() {
        let v = qm9_heavy_vocab();
        let r = check_validity(&graph(&[0, 0, 0, 0], &[(0, 1, 1), (2, 3, 1)]), &v);
        assert!(r.valid);
        assert_eq!(r.fragment_count, 2);
    }

    #[test]
    fn molfile_format_is_exact() {
        let v = qm9_heavy_vocab();
        let single = write_molfile(&graph(&[0], &[]), &v, "m").unwrap();
        let lines: Vec<&str> = single.lines().collect();
        assert_eq!(lines[0], "m");
        assert_eq!(lines[1], "");
        assert_eq!(lines[2], "");
        assert_eq!(lines[3], "  1  0  0  0  0  0  0  0  0  0999 V2000");
        assert_eq!(lines[4], "    0.0000    0.0000    0.0000 C   0  0  0  0  0  0  0  0  0  0  0  0");
        assert_eq!(lines[5], "M  END");

        let ethane = write_molfile(&graph(&[0, 0], &[(0, 1, 1)]), &v, "cc").unwrap();
        assert_eq!(ethane.lines().nth(6), Some("  1  2  1  0"));
    }

    #[test]
    fn molfile_round_trip_and_errors() {
        let v = qm9_heavy_vocab();
        let g = graph(&[0, 2, 1, 3], &[(0, 1, 2), (0, 2, 1), (2, 3, 1)]);
        let text = write_molfile(&g, &v, "x").unwrap();
        assert_eq!(read_molfile(&text, &v).unwrap(), g);

        let bad = text.replacen(" O ", " Xx", 1);
        assert!(matches!(read_molfile(&bad, &v), Err(Error::UnknownAtom(s)) if s == "Xx"));
        let truncated = text.replace("M  END\n", "");
        assert!(matches!(read_molfile(&truncated, &v), Err(Error::Molfile(_))));
        let out_of_range = text.replace("  3  4  1  0", "  3  9  1  0");
        assert!(read_molfile(&out_of_range, &v).is_err());
        assert!(read_molfile("x\n\n\n  garbage\n", &v).is_err());
    }

    #[test]
    fn sdf_round_trip() {
        let v = qm9_heavy_vocab();
        let gs = [graph(&[0], &[]), graph(&[0, 1], &[(0, 1, 3)])];
        let sdf = write_sdf(gs.iter().enumerate().map(|(i, g)| (g, format!("mol{i}"))), &v).unwrap();
        assert_eq!(sdf.matches("$$$$").count(), 2);
        assert_eq!(read_sdf(&sdf, &v).unwrap(), gs.to_vec());
    }
}
