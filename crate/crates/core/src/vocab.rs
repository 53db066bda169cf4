//! Atom and bond alphabets.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Node categories with their atomic masses (daltons) and maximum valences.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomVocabulary {
    symbols: Vec<String>,
    weights: Vec<f64>,
    max_valence: Vec<u32>,
}

impl AtomVocabulary {
    pub fn new(symbols: Vec<String>, weights: Vec<f64>, max_valence: Vec<u32>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Vocabulary("no atom types".into()));
        }
        if symbols.len() != weights.len() || symbols.len() != max_valence.len() {
            return Err(Error::Vocabulary("atom symbols, weights and valences differ in length".into()));
        }
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("bad atom symbol `{s}`")));
            }
            if symbols[..i].contains(s) {
                return Err(Error::Vocabulary(format!("duplicate atom symbol `{s}`")));
            }
        }
        // Zero weights are accepted so property tests can use degenerate tables.
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Vocabulary("atom weights must be finite and non-negative".into()));
        }
        if max_valence.iter().any(|&v| v < 1) {
            return Err(Error::Vocabulary("max valence must be at least 1".into()));
        }
        Ok(Self { symbols, weights, max_valence })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn max_valences(&self) -> &[u32] {
        &self.max_valence
    }

    pub fn symbol(&self, k: usize) -> &str {
        &self.symbols[k]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn max_valence(&self, k: usize) -> u32 {
        self.max_valence[k]
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }
}

/// Edge categories. Index 0 is always the absence of a bond.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeVocabulary {
    labels: Vec<String>,
    bond_order: Vec<u32>,
}

impl EdgeVocabulary {
    pub fn new(labels: Vec<String>, bond_order: Vec<u32>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Vocabulary("need a no-bond category and at least one bond".into()));
        }
        if labels.len() != bond_order.len() {
            return Err(Error::Vocabulary("bond labels and orders differ in length".into()));
        }
        if bond_order[0] != 0 {
            return Err(Error::Vocabulary("category 0 must be the no-bond category".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("bad bond label `{l}`")));
            }
            if labels[..i].contains(l) {
                return Err(Error::Vocabulary(format!("duplicate bond label `{l}`")));
            }
        }
        Ok(Self { labels, bond_order })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn orders(&self) -> &[u32] {
        &self.bond_order
    }

    pub fn bond_order(&self, k: usize) -> u32 {
        self.bond_order[k]
    }

    /// First category carrying the given bond order.
    pub fn index_of_order(&self, order: u32) -> Option<usize> {
        self.bond_order.iter().position(|&o| o == order)
    }
}

/// Atom and bond alphabets used together by every graph of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub atoms: AtomVocabulary,
    pub bonds: EdgeVocabulary,
}

impl Vocabulary {
    /// Node category count `a`.
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Edge category count `b`, including no-bond.
    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    /// Parses the key-value vocabulary format:
    ///
    /// ```text
    /// # comment
    /// atom = C 12.011 4
    /// bond = none 0
    /// bond = single 1
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut weights = Vec::new();
        let mut valences = Vec::new();
        let mut labels = Vec::new();
        let mut orders = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: idx + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| parse_err("expected `key = value`".into()))?;
            let fields: Vec<&str> = value.split_whitespace().collect();
            match key.trim() {
                "atom" => {
                    let [sym, w, v] = fields[..] else {
                        return Err(parse_err("atom needs `symbol weight valence`".into()));
                    };
                    symbols.push(sym.to_string());
                    weights.push(w.parse().map_err(|_| parse_err(format!("bad weight `{w}`")))?);
                    valences.push(v.parse().map_err(|_| parse_err(format!("bad valence `{v}`")))?);
                }
                "bond" => {
                    let [label, order] = fields[..] else {
                        return Err(parse_err("bond needs `label order`".into()));
                    };
                    labels.push(label.to_string());
                    orders.push(order.parse().map_err(|_| parse_err(format!("bad bond order `{order}`")))?);
                }
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        Ok(Self {
            atoms: AtomVocabulary::new(symbols, weights, valences)?,
            bonds: EdgeVocabulary::new(labels, orders)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in 0..self.atoms.len() {
            let _ =
                writeln!(out, "atom = {} {} {}", self.atoms.symbol(k), self.atoms.weight(k), self.atoms.max_valence(k));
        }
        for k in 0..self.bonds.len() {
            let _ = writeln!(out, "bond = {} {}", self.bonds.labels[k], self.bonds.bond_order(k));
        }
        out
    }
}

/// Heavy-atom alphabet of QM9 in kekulized form: C, N, O, F with no-bond,
/// single, double and triple bonds.
pub fn qm9_heavy_vocab() -> Vocabulary {
    let atoms = AtomVocabulary::new(
        ["C", "N", "O", "F"].map(String::from).to_vec(),
        vec![12.011, 14.007, 15.999, 18.998],
        vec![4, 3, 2, 1],
    )
    .expect("static atom table");
    let bonds =
        EdgeVocabulary::new(["none", "single", "double", "triple"].map(String::from).to_vec(), vec![0, 1, 2, 3])
            .expect("static bond table");
    Vocabulary { atoms, bonds }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qm9_table_values() {
        let v = qm9_heavy_vocab();
        let c = v.atoms.index_of("C").unwrap();
        let f = v.atoms.index_of("F").unwrap();
        assert_eq!(v.atoms.weight(c), 12.011);
        assert_eq!(v.atoms.max_valence(f), 1);
        assert_eq!(v.bonds.bond_order(0), 0);
        assert_eq!(v.bonds.labels()[0], "none");
        assert_eq!(v.atom_count(), 4);
        assert_eq!(v.bond_count(), 4);
    }

    #[test]
    fn text_round_trip() {
        let v = qm9_heavy_vocab();
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(Vocabulary::parse("atom = C 12 4\nbond = single 1\nbond = none 0\n").is_err());
        assert!(Vocabulary::parse("atom = C 12 4\natom = C 13 4\nbond = none 0\nbond = s 1\n").is_err());
        assert!(Vocabulary::parse("atom = C 12 0\nbond = none 0\nbond = s 1\n").is_err());
        let err = Vocabulary::parse("atom = C twelve 4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
