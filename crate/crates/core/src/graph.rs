//! Categorical graph states.
//!
//! A [`GraphState`] holds a node matrix `X` (n×a) and a dense edge tensor
//! `E` (n×n×b). Discrete states hold one-hot rows; soft states hold
//! probability rows. Only the upper triangle of `E` is ever sampled or
//! updated; the lower triangle mirrors it and the diagonal is pinned to the
//! no-bond category.

use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance used by [`GraphState::validate`].
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Rows whose mass deviates further than this from 1 are refused by the samplers.
pub const SAMPLING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Discrete,
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    n: usize,
    a: usize,
    b: usize,
    x: Vec<f64>,
    e: Vec<f64>,
    mode: Mode,
}

/// A probability vector over node or edge categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDistribution(Vec<f64>);

impl CategoryDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidState("negative or NaN probability".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NotNormalized { index: "distribution".into(), sum });
        }
        Ok(Self(p))
    }

    pub fn one_hot(k: usize, len: usize) -> Self {
        let mut p = vec![0.0; len];
        p[k] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Inverse-CDF draw: the first category whose cumulative mass exceeds `u`.
///
/// Falls back to the last category with positive mass when rounding leaves
/// the cumulative sum short of `u`.
pub fn inverse_cdf(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            acc += pk;
            last_positive = k;
            if u < acc {
                return k;
            }
        }
    }
    last_positive
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// Clamps negatives to zero and renormalizes. When no mass survives, the
/// fallback row is returned, or the uniform row if none was supplied.
pub fn project_row(row: &[f64], fallback: Option<&[f64]>) -> Vec<f64> {
    let clamped: Vec<f64> = row.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let sum: f64 = clamped.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        return clamped.into_iter().map(|v| v / sum).collect();
    }
    match fallback {
        Some(f) => f.to_vec(),
        None => vec![1.0 / row.len() as f64; row.len()],
    }
}

fn check_row_mass(row: &[f64], index: impl FnOnce() -> String) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if !((sum - 1.0).abs() <= SAMPLING_TOL) || row.iter().any(|v| *v < 0.0) {
        return Err(Error::NotNormalized { index: index(), sum });
    }
    Ok(())
}

impl GraphState {
    /// Builds a one-hot graph from atom categories and undirected bonds `(i, j, k)`
    /// with `k ≥ 1`. Pairs not listed get the no-bond category.
    pub fn from_discrete(atom_types: &[usize], bonds: &[(usize, usize, usize)], a: usize, b: usize) -> Result<Self> {
        let n = atom_types.len();
        let mut g = Self::empty(n, a, b, Mode::Discrete);
        for (i, &k) in atom_types.iter().enumerate() {
            if k >= a {
                return Err(Error::InvalidState(format!("atom category {k} out of range")));
            }
            g.x[i * a + k] = 1.0;
        }
        for i in 0..n {
            for j in 0..n {
                g.e[(i * n + j) * b] = 1.0;
            }
        }
        for &(i, j, k) in bonds {
            if i >= n || j >= n || i == j {
                return Err(Error::InvalidState(format!("bad bond endpoints ({i}, {j})")));
            }
            if k >= b {
                return Err(Error::UnknownBond(k));
            }
            g.set_edge_category(i, j, k);
        }
        Ok(g)
    }

    /// Soft state with every row and off-diagonal fiber set to the given vectors.
    pub fn filled(n: usize, node_row: &[f64], edge_fiber: &[f64]) -> Self {
        let a = node_row.len();
        let b = edge_fiber.len();
        let mut g = Self::empty(n, a, b, Mode::Soft);
        for i in 0..n {
            g.x[i * a..(i + 1) * a].copy_from_slice(node_row);
            for j in 0..n {
                let off = (i * n + j) * b;
                if i == j {
                    g.e[off] = 1.0;
                } else {
                    g.e[off..off + b].copy_from_slice(edge_fiber);
                }
            }
        }
        g
    }

    fn empty(n: usize, a: usize, b: usize, mode: Mode) -> Self {
        Self { n, a, b, x: vec![0.0; n * a], e: vec![0.0; n * n * b], mode }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn atom_categories(&self) -> usize {
        self.a
    }

    pub fn edge_categories(&self) -> usize {
        self.b
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_discrete(&self) -> bool {
        self.mode == Mode::Discrete
    }

    /// Relabels the state as soft so it can be fed to guidance or projection.
    pub fn into_soft(mut self) -> Self {
        self.mode = Mode::Soft;
        self
    }

    pub fn node_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.a..(i + 1) * self.a]
    }

    pub fn node_row_mut(&mut self, i: usize) -> &mut [f64] {
        self.mode = Mode::Soft;
        &mut self.x[i * self.a..(i + 1) * self.a]
    }

    pub fn edge_fiber(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.n + j) * self.b;
        &self.e[off..off + self.b]
    }

    /// Writes the fiber at `(i, j)` and its mirror `(j, i)`.
    pub fn set_edge_fiber(&mut self, i: usize, j: usize, fiber: &[f64]) {
        debug_assert!(i != j, "diagonal fibers are pinned to no-bond");
        self.mode = Mode::Soft;
        let b = self.b;
        let off = (i * self.n + j) * b;
        self.e[off..off + b].copy_from_slice(fiber);
        let off = (j * self.n + i) * b;
        self.e[off..off + b].copy_from_slice(fiber);
    }

    pub fn set_node_row(&mut self, i: usize, row: &[f64]) {
        self.node_row_mut(i).copy_from_slice(row);
    }

    fn set_edge_category(&mut self, i: usize, j: usize, k: usize) {
        let b = self.b;
        for (p, q) in [(i, j), (j, i)] {
            let off = (p * self.n + q) * b;
            self.e[off..off + b].fill(0.0);
            self.e[off + k] = 1.0;
        }
    }

    /// Node matrix flattened row-major (n×a).
    pub fn node_matrix(&self) -> &[f64] {
        &self.x
    }

    /// Edge tensor flattened row-major (n×n×b).
    pub fn edge_tensor(&self) -> &[f64] {
        &self.e
    }

    /// Category of node `i`. Meaningful for discrete states; soft states report the argmax.
    pub fn atom_type(&self, i: usize) -> usize {
        argmax(self.node_row(i))
    }

    /// Category of edge `(i, j)`. Meaningful for discrete states; soft states report the argmax.
    pub fn edge_type(&self, i: usize, j: usize) -> usize {
        argmax(self.edge_fiber(i, j))
    }

    pub fn atom_types(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.atom_type(i)).collect()
    }

    /// Bonded upper-triangle pairs `(i, j, k)` with `i < j` and `k ≥ 1`.
    pub fn bonds(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let k = self.edge_type(i, j);
                if k != 0 {
                    out.push((i, j, k));
                }
            }
        }
        out
    }

    /// Returns the graph with node `perm[i]` of the output taken from node `i` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n);
        let mut g = Self::empty(self.n, self.a, self.b, self.mode);
        for (i, &pi) in perm.iter().enumerate() {
            g.x[pi * self.a..(pi + 1) * self.a].copy_from_slice(self.node_row(i));
            for (j, &pj) in perm.iter().enumerate() {
                let off = (pi * self.n + pj) * self.b;
                g.e[off..off + self.b].copy_from_slice(self.edge_fiber(i, j));
            }
        }
        g
    }

    /// Checks normalization, symmetry, the no-bond diagonal, and one-hotness in discrete mode.
    pub fn validate(&self) -> Result<()> {
        let check = |row: &[f64], what: String| -> Result<()> {
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidState(format!("{what} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotNormalized { index: what, sum });
            }
            if self.mode == Mode::Discrete && !row.iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(Error::InvalidState(format!("{what} is not one-hot")));
            }
            Ok(())
        };
        for i in 0..self.n {
            check(self.node_row(i), format!("node {i}"))?;
            let diag = self.edge_fiber(i, i);
            if diag[0] != 1.0 || diag[1..].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidState(format!("diagonal fiber {i} is not no-bond")));
            }
            for j in i + 1..self.n {
                check(self.edge_fiber(i, j), format!("edge ({i}, {j})"))?;
                if self.edge_fiber(i, j) != self.edge_fiber(j, i) {
                    return Err(Error::InvalidState(format!("edge ({i}, {j}) is not symmetric")));
                }
            }
        }
        Ok(())
    }

    /// Draws a discrete graph: each node row and each upper-triangle fiber by
    /// inverse CDF, nodes first then edges in row-major order.
    pub fn sample_discrete<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let mut out = Self::empty(self.n, self.a, self.b, Mode::Discrete);
        for i in 0..self.n {
            let row = self.node_row(i);
            check_row_mass(row, || format!("node {i}"))?;
            let k = inverse_cdf(row, rng.gen::<f64>());
            out.x[i * self.a + k] = 1.0;
        }
        for i in 0..self.n {
            out.e[(i * self.n + i) * self.b] = 1.0;
            for j in i + 1..self.n {
                let fiber = self.edge_fiber(i, j);
                check_row_mass(fiber, || format!("edge ({i}, {j})"))?;
                let k = inverse_cdf(fiber, rng.gen::<f64>());
                out.set_edge_category(i, j, k);
            }
        }
        Ok(out)
    }

    /// Deterministic decoding: the most probable category per row and fiber.
    pub fn argmax_discrete(&self) -> Self {
        let mut out = Self::empty(self.n, self.a, self.b, Mode::Discrete);
        for i in 0..self.n {
            out.x[i * self.a + argmax(self.node_row(i))] = 1.0;
            out.e[(i * self.n + i) * self.b] = 1.0;
            for j in i + 1..self.n {
                out.set_edge_category(i, j, argmax(self.edge_fiber(i, j)));
            }
        }
        out
    }

    /// Clamp-and-renormalize every row and upper-triangle fiber, mirroring
    /// the result. Rows left without mass take the matching row of
    /// `fallback`, or the uniform row when no fallback is given.
    pub fn project_simplex(&self, fallback: Option<&GraphState>) -> Self {
        let mut out = Self::empty(self.n, self.a, self.b, Mode::Soft);
        for i in 0..self.n {
            let row = project_row(self.node_row(i), fallback.map(|f| f.node_row(i)));
            out.x[i * self.a..(i + 1) * self.a].copy_from_slice(&row);
            out.e[(i * self.n + i) * self.b] = 1.0;
            for j in i + 1..self.n {
                let fiber = project_row(self.edge_fiber(i, j), fallback.map(|f| f.edge_fiber(i, j)));
                out.set_edge_fiber(i, j, &fiber);
            }
        }
        out
    }

    /// Raw state with arbitrary real entries, used for unprojected guidance updates.
    pub(crate) fn from_raw(n: usize, a: usize, b: usize, x: Vec<f64>, e: Vec<f64>) -> Self {
        debug_assert_eq!(x.len(), n * a);
        debug_assert_eq!(e.len(), n * n * b);
        Self { n, a, b, x, e, mode: Mode::Soft }
    }
}
