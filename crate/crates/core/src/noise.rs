//! Forward process: cosine schedule, marginal transition matrices and the
//! single-step posterior used by the reverse chain.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{CategoryDistribution, GraphState};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_COSINE_S: f64 = 0.008;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.len();
        let data = rows.iter().flat_map(|r| {
            assert_eq!(r.len(), dim, "matrix must be square");
            r.iter().copied()
        });
        Self { dim, data: data.collect() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.dim, rhs.dim);
        let d = self.dim;
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let lhs = self.get(i, k);
                for j in 0..d {
                    data[i * d + j] += lhs * rhs.get(k, j);
                }
            }
        }
        Matrix { dim: d, data }
    }

    /// `v · M` for a row vector `v`.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += vi * self.get(i, j);
                }
            }
        }
        out
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// `α I + (1 − α) 𝟙 mᵀ`: keep the current category with probability α,
/// otherwise resample from the marginal `m`.
pub fn transition_matrix(alpha: f64, m: &[f64]) -> Matrix {
    let d = m.len();
    let beta = 1.0 - alpha;
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            data[i * d + j] = beta * m[j] + if i == j { alpha } else { 0.0 };
        }
    }
    Matrix { dim: d, data }
}

/// Cumulative signal levels `ᾱ^t` for `t = 0..=T` and the per-step `α^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule `ᾱ^t ∝ cos²(π/2 · (t/T + s)/(1 + s))`, normalized so `ᾱ^0 = 1`.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(s > 0.0) {
            return Err(Error::Config("cosine offset s must be positive".into()));
        }
        let f = |t: usize| {
            let c = (FRAC_PI_2 * (t as f64 / steps as f64 + s) / (1.0 + s)).cos();
            c * c
        };
        let f0 = f(0);
        let mut alpha_bar: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        alpha_bar[0] = 1.0;
        // cos(π/2) is not exactly zero in floating point; clamp tiny negatives.
        alpha_bar.iter_mut().for_each(|v| *v = v.max(0.0));
        Self::from_alpha_bar(alpha_bar)
    }

    /// Builds a schedule from explicit cumulative levels `ᾱ^0..=ᾱ^T` (with `ᾱ^0 = 1`).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar must start at 1 and have T ≥ 1".into()));
        }
        let mut alpha = vec![1.0; alpha_bar.len()];
        for t in 1..alpha_bar.len() {
            if !(alpha_bar[t] <= alpha_bar[t - 1]) || alpha_bar[t] < 0.0 {
                return Err(Error::Config(format!("alpha_bar increases at t={t}")));
            }
            alpha[t] = if alpha_bar[t - 1] > 0.0 { alpha_bar[t] / alpha_bar[t - 1] } else { 0.0 };
        }
        Ok(Self { alpha, alpha_bar })
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Single-step posterior `q(x^{t−1} | x⁰, x^t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Posterior {
    Defined(CategoryDistribution),
    /// `q(x^t | x⁰) = 0`: this clean category cannot explain the observation.
    Unreachable,
}

impl Posterior {
    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Posterior::Defined(d) => Some(d.probs()),
            Posterior::Unreachable => None,
        }
    }
}

/// `q(x^{t−1} | x⁰, x^t) = (x^t Q^tᵀ ⊙ x⁰ Q̄^{t−1}) / (x⁰ Q̄^t x^tᵀ)`.
///
/// At `t = 1` the chain endpoint is the clean category itself.
pub fn posterior_step(x0: usize, xt: usize, t: usize, q_t: &Matrix, qbar_prev: &Matrix, qbar_t: &Matrix) -> Posterior {
    let d = q_t.dim();
    if t == 1 {
        return Posterior::Defined(CategoryDistribution::one_hot(x0, d));
    }
    let evidence = qbar_t.get(x0, xt);
    if !(evidence > 0.0) {
        return Posterior::Unreachable;
    }
    let mut p: Vec<f64> = (0..d).map(|k| q_t.get(k, xt) * qbar_prev.get(x0, k)).collect();
    // Normalize by the realized mass; it equals `evidence` up to rounding.
    let sum: f64 = p.iter().sum();
    if !(sum > 0.0) {
        return Posterior::Unreachable;
    }
    p.iter_mut().for_each(|v| *v /= sum);
    Posterior::Defined(CategoryDistribution::new(p).expect("normalized posterior"))
}

/// Per-step matrices for one category family (nodes or edges).
#[derive(Debug, Clone)]
struct FamilyTables {
    marginal: Vec<f64>,
    q: Vec<Matrix>,
    qbar: Vec<Matrix>,
    /// `posterior[t][x0 * d + xt]`, `None` when unreachable.
    posterior: Vec<Vec<Option<Vec<f64>>>>,
}

impl FamilyTables {
    fn build(schedule: &NoiseSchedule, marginal: &[f64]) -> Self {
        let steps = schedule.steps();
        let d = marginal.len();
        let q: Vec<Matrix> = (0..=steps).map(|t| transition_matrix(schedule.alpha(t), marginal)).collect();
        let qbar: Vec<Matrix> = (0..=steps).map(|t| transition_matrix(schedule.alpha_bar(t), marginal)).collect();
        let mut posterior = vec![Vec::new()];
        for t in 1..=steps {
            let table = (0..d * d)
                .map(|idx| {
                    let (x0, xt) = (idx / d, idx % d);
                    posterior_step(x0, xt, t, &q[t], &qbar[t - 1], &qbar[t]).probs().map(<[f64]>::to_vec)
                })
                .collect();
            posterior.push(table);
        }
        Self { marginal: marginal.to_vec(), q, qbar, posterior }
    }
}

/// The transition matrices at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct TransitionMatrices<'a> {
    pub q_x: &'a Matrix,
    pub q_e: &'a Matrix,
    pub qbar_x: &'a Matrix,
    pub qbar_e: &'a Matrix,
    pub m_x: &'a [f64],
    pub m_e: &'a [f64],
}

/// Schedule plus marginals, with every per-step matrix and posterior table precomputed.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    schedule: NoiseSchedule,
    nodes: FamilyTables,
    edges: FamilyTables,
}

impl NoiseModel {
    pub fn new(schedule: NoiseSchedule, m_x: &[f64], m_e: &[f64]) -> Result<Self> {
        for (name, m) in [("node", m_x), ("edge", m_e)] {
            let sum: f64 = m.iter().sum();
            if m.is_empty() || m.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{name} marginal is not a probability vector")));
            }
        }
        Ok(Self { nodes: FamilyTables::build(&schedule, m_x), edges: FamilyTables::build(&schedule, m_e), schedule })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn m_x(&self) -> &[f64] {
        &self.nodes.marginal
    }

    pub fn m_e(&self) -> &[f64] {
        &self.edges.marginal
    }

    pub fn transitions(&self, t: usize) -> TransitionMatrices<'_> {
        TransitionMatrices {
            q_x: &self.nodes.q[t],
            q_e: &self.edges.q[t],
            qbar_x: &self.nodes.qbar[t],
            qbar_e: &self.edges.qbar[t],
            m_x: &self.nodes.marginal,
            m_e: &self.edges.marginal,
        }
    }

    pub fn qbar_x(&self, t: usize) -> &Matrix {
        &self.nodes.qbar[t]
    }

    pub fn qbar_e(&self, t: usize) -> &Matrix {
        &self.edges.qbar[t]
    }

    pub fn q_x(&self, t: usize) -> &Matrix {
        &self.nodes.q[t]
    }

    pub fn q_e(&self, t: usize) -> &Matrix {
        &self.edges.q[t]
    }

    /// Cached node posterior `q(x^{t−1} | x⁰, x^t)`; `None` when unreachable.
    pub fn node_posterior(&self, t: usize, x0: usize, xt: usize) -> Option<&[f64]> {
        let d = self.nodes.marginal.len();
        self.nodes.posterior[t][x0 * d + xt].as_deref()
    }

    /// Cached edge posterior `q(e^{t−1} | e⁰, e^t)`; `None` when unreachable.
    pub fn edge_posterior(&self, t: usize, e0: usize, et: usize) -> Option<&[f64]> {
        let d = self.edges.marginal.len();
        self.edges.posterior[t][e0 * d + et].as_deref()
    }

    /// Soft state `(X⁰ Q̄^t, E⁰ Q̄^t)`.
    pub fn noised_distribution(&self, g0: &GraphState, t: usize) -> GraphState {
        let n = g0.n();
        let qx = self.qbar_x(t);
        let qe = self.qbar_e(t);
        let mut soft = GraphState::filled(n, self.m_x(), self.m_e());
        for i in 0..n {
            soft.set_node_row(i, &qx.left_mul(g0.node_row(i)));
            for j in i + 1..n {
                soft.set_edge_fiber(i, j, &qe.left_mul(g0.edge_fiber(i, j)));
            }
        }
        soft
    }

    /// Samples `G^t ~ q(G^t | G⁰)` in one step.
    pub fn forward_noise<R: Rng + ?Sized>(&self, g0: &GraphState, t: usize, rng: &mut R) -> Result<GraphState> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("timestep {t} outside 1..={}", self.steps())));
        }
        self.noised_distribution(g0, t).sample_discrete(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_shape() {
        let s = NoiseSchedule::cosine(500, 0.008).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(500) <= 1e-3);
        for t in 1..=500 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha(t) >= 0.0 && s.alpha(t) <= 1.0);
            assert!((s.beta_bar(t) - (1.0 - s.alpha_bar(t))).abs() == 0.0);
        }
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
    }

    #[test]
    fn transition_matrix_limits() {
        assert_eq!(transition_matrix(1.0, &[0.3, 0.7]), Matrix::identity(2));
        let full = transition_matrix(0.0, &[0.25, 0.75]);
        assert_eq!(full.row(0), &[0.25, 0.75]);
        assert_eq!(full.row(1), &[0.25, 0.75]);
        let mid = transition_matrix(0.6, &[0.5, 0.5]);
        let want = Matrix::from_rows(&[vec![0.8, 0.2], vec![0.2, 0.8]]);
        assert!(mid.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn noised_row_mixes_with_marginal() {
        let schedule = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let nm = NoiseModel::new(schedule, &[0.25, 0.75], &[0.5, 0.5]).unwrap();
        let g = GraphState::from_discrete(&[0], &[], 2, 2).unwrap();
        let soft = nm.noised_distribution(&g, 1);
        assert_eq!(soft.node_row(0), &[0.625, 0.375]);
    }

    #[test]
    fn identity_transition_leaves_graph_unchanged() {
        let schedule = NoiseSchedule::from_alpha_bar(vec![1.0, 1.0, 0.5]).unwrap();
        let nm = NoiseModel::new(schedule, &[0.25, 0.25, 0.25, 0.25], &[0.7, 0.1, 0.1, 0.1]).unwrap();
        let g = GraphState::from_discrete(&[0, 3, 2], &[(0, 1, 1), (1, 2, 3)], 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert_eq!(nm.forward_noise(&g, 1, &mut rng).unwrap(), g);
        }
        assert!(nm.forward_noise(&g, 0, &mut rng).is_err());
        assert!(nm.forward_noise(&g, 3, &mut rng).is_err());
    }

    #[test]
    fn posterior_worked_example() {
        // ᾱ¹ = 0.9, α² = 0.8 so ᾱ² = 0.72
        let m = [0.5, 0.5];
        let q2 = transition_matrix(0.8, &m);
        let qbar1 = transition_matrix(0.9, &m);
        let qbar2 = transition_matrix(0.72, &m);
        let p = posterior_step(0, 0, 2, &q2, &qbar1, &qbar2);
        let p = p.probs().unwrap();
        // enumeration: x¹=0 → 0.95·0.9, x¹=1 → 0.05·0.1
        let w = [0.95 * 0.9, 0.05 * 0.1];
        let z = w[0] + w[1];
        assert!((p[0] - w[0] / z).abs() < 1e-15);
        assert!((p[0] - 0.9942).abs() < 1e-4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_at_first_step_is_clean_category() {
        let m = [0.2, 0.3, 0.5];
        let q = transition_matrix(0.9, &m);
        let p = posterior_step(2, 0, 1, &q, &Matrix::identity(3), &q);
        assert_eq!(p.probs().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unreachable_observation_is_flagged() {
        // m has no mass on category 1, so x⁰ = 0 can never be observed as 1
        let m = [1.0, 0.0];
        let q = transition_matrix(0.5, &m);
        let qbar = transition_matrix(0.25, &m);
        assert_eq!(posterior_step(0, 1, 2, &q, &q, &qbar), Posterior::Unreachable);
    }
}
