//! Graph datasets: the line-oriented text format, empirical marginals and a
//! synthetic valence-valid generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::GraphState;
use crate::validity::check_validity;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    graphs: Vec<GraphState>,
    vocab: Vocabulary,
    node_count_histogram: BTreeMap<usize, f64>,
}

impl GraphDataset {
    /// Wraps discrete graphs, checking each against the vocabulary.
    pub fn new(graphs: Vec<GraphState>, vocab: Vocabulary) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (idx, g) in graphs.iter().enumerate() {
            if g.atom_categories() != vocab.atom_count() || g.edge_categories() != vocab.bond_count() {
                return Err(Error::InvalidState(format!("graph {idx} does not match the vocabulary dimensions")));
            }
            if !g.is_discrete() {
                return Err(Error::InvalidState(format!("graph {idx} is not discrete")));
            }
            g.validate()?;
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &graphs {
            *counts.entry(g.n()).or_default() += 1;
        }
        let total = graphs.len() as f64;
        let node_count_histogram = counts.into_iter().map(|(n, c)| (n, c as f64 / total)).collect();
        Ok(Self { graphs, vocab, node_count_histogram })
    }

    pub fn graphs(&self) -> &[GraphState] {
        &self.graphs
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Empirical distribution over node counts.
    pub fn node_count_histogram(&self) -> &BTreeMap<usize, f64> {
        &self.node_count_histogram
    }

    /// Draws a node count from the empirical size distribution.
    pub fn sample_node_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (&n, &p) in &self.node_count_histogram {
            acc += p;
            if u < acc {
                return n;
            }
        }
        *self.node_count_histogram.keys().next_back().expect("nonempty dataset")
    }

    /// Serializes to the dataset text format, one graph per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.graphs {
            out.push_str(&graph_to_line(g, &self.vocab));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut graphs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            graphs.push(parse_line(line, idx + 1, vocab)?);
        }
        Self::new(graphs, vocab.clone())
    }
}

/// Reads a dataset file in the `n;t_1,...,t_n;i,j,k ...` format.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<GraphDataset> {
    let text = std::fs::read_to_string(path)?;
    GraphDataset::parse(&text, vocab)
}

pub fn graph_to_line(g: &GraphState, vocab: &Vocabulary) -> String {
    let atoms: Vec<&str> = g.atom_types().into_iter().map(|k| vocab.atoms.symbol(k)).collect();
    let mut line = format!("{};{};", g.n(), atoms.join(","));
    for (idx, (i, j, k)) in g.bonds().into_iter().enumerate() {
        if idx > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{i},{j},{k}");
    }
    line
}

fn parse_line(line: &str, lineno: usize, vocab: &Vocabulary) -> Result<GraphState> {
    let err = |message: String| Error::Parse { line: lineno, message };
    let parts: Vec<&str> = line.split(';').collect();
    if parts.len() != 3 {
        return Err(err("expected `n;atoms;edges`".into()));
    }
    let n: usize = parts[0].trim().parse().map_err(|_| err(format!("bad node count `{}`", parts[0])))?;
    if n == 0 {
        return Err(err("graph has no nodes".into()));
    }
    let atoms = parts[1]
        .split(',')
        .map(|s| {
            let s = s.trim();
            vocab.atoms.index_of(s).ok_or_else(|| err(format!("unknown atom symbol `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if atoms.len() != n {
        return Err(err(format!("declared {n} nodes but listed {}", atoms.len())));
    }
    let mut bonds = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for tok in parts[2].split_whitespace() {
        let fields: Vec<&str> = tok.split(',').collect();
        let [i, j, k] = fields[..] else {
            return Err(err(format!("bad edge `{tok}`")));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad edge `{tok}`")));
        let (i, j, k) = (parse(i)?, parse(j)?, parse(k)?);
        if i >= j {
            return Err(err(format!("edge `{tok}` must list endpoints with i < j")));
        }
        if j >= n {
            return Err(err(format!("edge `{tok}` references node {j} of a {n}-node graph")));
        }
        if k == 0 || k >= vocab.bond_count() {
            return Err(err(format!("unknown bond category {k} in edge `{tok}`")));
        }
        if !seen.insert((i, j)) {
            return Err(err(format!("duplicate edge ({i}, {j})")));
        }
        bonds.push((i, j, k));
    }
    GraphState::from_discrete(&atoms, &bonds, vocab.atom_count(), vocab.bond_count())
}

/// Empirical node and edge marginals.
///
/// Node marginals count every node; edge marginals count every ordered
/// off-diagonal pair, so the no-bond category is included.
pub fn compute_marginals(ds: &GraphDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let a = ds.vocab.atom_count();
    let b = ds.vocab.bond_count();
    let mut mx = vec![0.0; a];
    let mut me = vec![0.0; b];
    let mut nodes = 0usize;
    let mut pairs = 0usize;
    for g in &ds.graphs {
        for i in 0..g.n() {
            mx[g.atom_type(i)] += 1.0;
            for j in 0..g.n() {
                if i != j {
                    me[g.edge_type(i, j)] += 1.0;
                }
            }
        }
        nodes += g.n();
        pairs += g.n() * (g.n() - 1);
    }
    mx.iter_mut().for_each(|v| *v /= nodes as f64);
    if pairs == 0 {
        // Only single-atom graphs: no pair was observed, so no-bond is the only evidence.
        me.fill(0.0);
        me[0] = 1.0;
    } else {
        me.iter_mut().for_each(|v| *v /= pairs as f64);
    }
    Ok((mx, me))
}

/// Atom-type proportions used by the synthetic generator for the QM9 alphabet.
const SYNTH_ATOM_WEIGHTS: [f64; 4] = [0.70, 0.11, 0.14, 0.05];
/// Relative preference for bond orders 1, 2, 3 when attaching a new atom.
const SYNTH_BOND_WEIGHTS: [f64; 3] = [0.78, 0.17, 0.05];
const SYNTH_RING_CLOSURE: f64 = 0.15;

/// Generates valence-valid connected graphs by sequential random attachment.
///
/// Node counts are uniform on `1..=max_nodes`. Each new atom bonds to a
/// random earlier atom that still has free valence; the attempt is discarded
/// and redrawn whenever no partner is available. A ring-closing single bond
/// is added with small probability. Atom types follow a carbon-rich
/// distribution (C, N, O, F order for four-atom alphabets; otherwise biased
/// towards category 0).
pub fn generate_synthetic_dataset(
    vocab: &Vocabulary,
    count: usize,
    max_nodes: usize,
    seed: u64,
) -> Result<GraphDataset> {
    if count == 0 || max_nodes == 0 {
        return Err(Error::Config("count and max_nodes must be at least 1".into()));
    }
    let atom_weights = synthetic_atom_weights(vocab.atom_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(count);
    while graphs.len() < count {
        let n = rng.gen_range(1..=max_nodes);
        if let Some(g) = try_attach(vocab, n, &atom_weights, &mut rng) {
            debug_assert!(check_validity(&g, vocab).valid);
            graphs.push(g);
        }
    }
    GraphDataset::new(graphs, vocab.clone())
}

fn synthetic_atom_weights(a: usize) -> Vec<f64> {
    if a == SYNTH_ATOM_WEIGHTS.len() {
        return SYNTH_ATOM_WEIGHTS.to_vec();
    }
    // Category 0 gets 70% and the rest share the remainder.
    if a == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.3 / (a - 1) as f64; a];
    w[0] = 0.7;
    w
}

fn draw_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    crate::graph::inverse_cdf(&weights.iter().map(|w| w / total).collect::<Vec<_>>(), rng.gen::<f64>())
}

fn try_attach<R: Rng + ?Sized>(vocab: &Vocabulary, n: usize, atom_weights: &[f64], rng: &mut R) -> Option<GraphState> {
    let mut atoms = Vec::with_capacity(n);
    let mut residual: Vec<u32> = Vec::with_capacity(n);
    let mut bonds: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..n {
        let t = draw_weighted(atom_weights, rng);
        atoms.push(t);
        residual.push(vocab.atoms.max_valence(t));
        if i == 0 {
            continue;
        }
        let partners: Vec<usize> = (0..i).filter(|&j| residual[j] >= 1).collect();
        let &j = partners.choose(rng)?;
        let max_order = residual[i].min(residual[j]);
        let order = pick_bond_order(vocab, max_order, rng)?;
        let k = vocab.bonds.index_of_order(order)?;
        residual[i] -= order;
        residual[j] -= order;
        bonds.push((j, i, k));
    }
    if n >= 3 && rng.gen::<f64>() < SYNTH_RING_CLOSURE {
        let single = vocab.bonds.index_of_order(1)?;
        let candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| residual[i] >= 1 && residual[j] >= 1 && !bonds.iter().any(|&(p, q, _)| p == i && q == j))
            .collect();
        if let Some(&(i, j)) = candidates.choose(rng) {
            residual[i] -= 1;
            residual[j] -= 1;
            bonds.push((i, j, single));
        }
    }
    GraphState::from_discrete(&atoms, &bonds, vocab.atom_count(), vocab.bond_count()).ok()
}

fn pick_bond_order<R: Rng + ?Sized>(vocab: &Vocabulary, max_order: u32, rng: &mut R) -> Option<u32> {
    let allowed: Vec<(u32, f64)> = (1..=max_order)
        .filter(|o| vocab.bonds.index_of_order(*o).is_some())
        .map(|o| (o, SYNTH_BOND_WEIGHTS.get(o as usize - 1).copied().unwrap_or(0.01)))
        .collect();
    if allowed.is_empty() {
        return None;
    }
    let weights: Vec<f64> = allowed.iter().map(|(_, w)| *w).collect();
    Some(allowed[draw_weighted(&weights, rng)].0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::qm9_heavy_vocab;

    #[test]
    fn parses_single_line() {
        let v = qm9_heavy_vocab();
        let ds = GraphDataset::parse("3;C,C,O;0,1,1 1,2,1\n", &v).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.graphs()[0].n(), 3);
        assert_eq!(ds.graphs()[0].edge_type(2, 1), 1);
        assert_eq!(ds.node_count_histogram().get(&3), Some(&1.0));
    }

    #[test]
    fn empty_file_is_an_error() {
        let v = qm9_heavy_vocab();
        let err = GraphDataset::parse("# only a comment\n\n", &v).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn out_of_range_bond_names_the_category() {
        let v = qm9_heavy_vocab();
        let err = GraphDataset::parse("# header\n2;C,C;0,1,9\n", &v).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains('9'), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_edges_and_atoms() {
        let v = qm9_heavy_vocab();
        assert!(GraphDataset::parse("2;C,C;1,0,1\n", &v).is_err());
        assert!(GraphDataset::parse("2;C,C;0,1,1 0,1,2\n", &v).is_err());
        assert!(GraphDataset::parse("2;C,Xx;\n", &v).is_err());
        assert!(GraphDataset::parse("3;C,C;\n", &v).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = qm9_heavy_vocab();
        let ds = generate_synthetic_dataset(&v, 40, 6, 1).unwrap();
        assert_eq!(GraphDataset::parse(&ds.to_text(), &v).unwrap(), ds);
    }

    #[test]
    fn marginals_of_single_bond() {
        let v = qm9_heavy_vocab();
        let ds = GraphDataset::parse("2;C,O;0,1,1\n", &v).unwrap();
        let (mx, me) = compute_marginals(&ds).unwrap();
        assert_eq!(mx, vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(me, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn marginals_over_two_graphs() {
        // brute force: graph 1 contributes two ordered single-bond pairs,
        // graph 2 two ordered no-bond pairs
        let v = qm9_heavy_vocab();
        let ds = GraphDataset::parse("2;C,C;0,1,1\n2;C,O;\n", &v).unwrap();
        let (_, me) = compute_marginals(&ds).unwrap();
        assert_eq!(me, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn tiny_synthetic_dataset() {
        let v = qm9_heavy_vocab();
        let ds = generate_synthetic_dataset(&v, 1, 1, 0).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.graphs()[0].n(), 1);
        assert!(check_validity(&ds.graphs()[0], &v).valid);
    }

    #[test]
    fn synthetic_dataset_is_valid_connected_and_deterministic() {
        let v = qm9_heavy_vocab();
        let a = generate_synthetic_dataset(&v, 500, 6, 7).unwrap();
        let b = generate_synthetic_dataset(&v, 500, 6, 7).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        for g in a.graphs() {
            let r = check_validity(g, &v);
            assert!(r.valid);
            assert_eq!(r.fragment_count, 1);
        }
        let (mx, _) = compute_marginals(&a).unwrap();
        assert!(mx[0] > 0.5, "carbon-rich marginal expected, got {mx:?}");
        assert!(mx.iter().all(|&p| p > 0.0));
        for n in 1..=6 {
            assert!(a.node_count_histogram().contains_key(&n));
        }
    }

    #[test]
    fn synthetic_rejects_zero_sizes() {
        let v = qm9_heavy_vocab();
        assert!(generate_synthetic_dataset(&v, 0, 3, 0).is_err());
        assert!(generate_synthetic_dataset(&v, 3, 0, 0).is_err());
    }
}
