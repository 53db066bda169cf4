//! Training-free guidance for categorical states.
//!
//! A property `f` of the clean graph is compared with a target `y` through
//! the squared error `(f(Ĝ⁰) − y)²`. Its gradient with respect to the
//! category probabilities, evaluated at graphs sampled from the denoiser's
//! clean-graph estimate, is subtracted (scaled by λ) from the probabilities,
//! which are then clamped to be non-negative and renormalized.

use rand::Rng;

use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::graph::{project_row, GraphState};
use crate::vocab::Vocabulary;

/// Differentiable graph properties. All are linear in `X` or `E`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropertyFunction {
    /// Fraction of heavy atoms of the given category.
    AtomProportion { atom: usize },
    /// Summed heavy-atom mass in daltons.
    MolecularWeight,
    /// Summed bond order over node pairs.
    BondCount,
}

impl PropertyFunction {
    pub fn eval(&self, g: &GraphState, vocab: &Vocabulary) -> f64 {
        match *self {
            PropertyFunction::AtomProportion { atom } => eval_atom_proportion(g, atom),
            PropertyFunction::MolecularWeight => eval_molecular_weight(g, vocab),
            PropertyFunction::BondCount => eval_bond_count(g, vocab),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PropertyFunction::AtomProportion { .. } => "proportion",
            PropertyFunction::MolecularWeight => "weight",
            PropertyFunction::BondCount => "bonds",
        }
    }

    /// `∂f/∂X` and `∂f/∂E`. Constant, since every built-in property is linear.
    fn partials(&self, g: &GraphState, vocab: &Vocabulary) -> GuidanceGradient {
        let (n, a, b) = (g.n(), g.atom_categories(), g.edge_categories());
        let mut grad = GuidanceGradient::zeros(n, a, b);
        match *self {
            PropertyFunction::AtomProportion { atom } => {
                for i in 0..n {
                    grad.gx[i * a + atom] = 1.0 / n as f64;
                }
            }
            PropertyFunction::MolecularWeight => {
                for i in 0..n {
                    grad.gx[i * a..(i + 1) * a].copy_from_slice(vocab.atoms.weights());
                }
            }
            PropertyFunction::BondCount => {
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            for k in 0..b {
                                grad.ge[(i * n + j) * b + k] = vocab.bonds.bond_order(k) as f64;
                            }
                        }
                    }
                }
            }
        }
        grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaSchedule {
    #[default]
    Constant,
}

/// How a row's gradient is used by the guided update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientProjection {
    /// Subtract the row mean first, keeping only the component that moves
    /// mass between categories. A shift shared by every category would
    /// otherwise act through the clamp alone.
    #[default]
    Tangent,
    /// Use the gradient as is.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub function: PropertyFunction,
    pub target: f64,
    pub lambda: f64,
    /// Number of clean-graph samples averaged per gradient estimate.
    pub samples: usize,
    pub lambda_schedule: LambdaSchedule,
    pub projection: GradientProjection,
}

impl GuidanceSpec {
    pub fn new(function: PropertyFunction, target: f64, lambda: f64, samples: usize) -> Result<Self> {
        let spec = Self {
            function,
            target,
            lambda,
            samples,
            lambda_schedule: LambdaSchedule::Constant,
            projection: GradientProjection::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if self.samples == 0 {
            return Err(Error::Config("guidance needs at least one sample".into()));
        }
        if !self.target.is_finite() {
            return Err(Error::Config("guidance target must be finite".into()));
        }
        if matches!(self.function, PropertyFunction::AtomProportion { .. }) && !(0.0..=1.0).contains(&self.target) {
            return Err(Error::Config(format!("proportion target {} outside [0, 1]", self.target)));
        }
        Ok(())
    }

    /// Guidance scale at step `t`.
    pub fn lambda_at(&self, _t: usize) -> f64 {
        match self.lambda_schedule {
            LambdaSchedule::Constant => self.lambda,
        }
    }
}

/// Loss gradient with respect to node probabilities (n×a) and edge probabilities (n×n×b).
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceGradient {
    pub n: usize,
    pub a: usize,
    pub b: usize,
    pub gx: Vec<f64>,
    pub ge: Vec<f64>,
}

impl GuidanceGradient {
    pub fn zeros(n: usize, a: usize, b: usize) -> Self {
        Self { n, a, b, gx: vec![0.0; n * a], ge: vec![0.0; n * n * b] }
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.gx[i * self.a..(i + 1) * self.a]
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.n + j) * self.b;
        &self.ge[off..off + self.b]
    }

    fn scale(mut self, s: f64) -> Self {
        self.gx.iter_mut().chain(self.ge.iter_mut()).for_each(|v| *v *= s);
        self
    }

    fn add_assign(&mut self, other: &GuidanceGradient) {
        for (a, b) in self.gx.iter_mut().zip(&other.gx) {
            *a += b;
        }
        for (a, b) in self.ge.iter_mut().zip(&other.ge) {
            *a += b;
        }
    }
}

/// `(1/n) Σ_i X[i, k]`.
pub fn eval_atom_proportion(g: &GraphState, atom: usize) -> f64 {
    let n = g.n();
    (0..n).map(|i| g.node_row(i)[atom]).sum::<f64>() / n as f64
}

/// `Σ_i Σ_k X[i, k] · weight[k]`.
pub fn eval_molecular_weight(g: &GraphState, vocab: &Vocabulary) -> f64 {
    let w = vocab.atoms.weights();
    (0..g.n()).map(|i| g.node_row(i).iter().zip(w).map(|(p, w)| p * w).sum::<f64>()).sum()
}

/// `Σ_{i<j} Σ_k E[i, j, k] · order[k]`.
pub fn eval_bond_count(g: &GraphState, vocab: &Vocabulary) -> f64 {
    let orders = vocab.bonds.orders();
    let mut total = 0.0;
    for i in 0..g.n() {
        for j in i + 1..g.n() {
            total += g.edge_fiber(i, j).iter().zip(orders).map(|(p, &o)| p * o as f64).sum::<f64>();
        }
    }
    total
}

/// Squared error `(f(Ĝ⁰) − y)²` and its gradient `2 (f − y) ∂f`.
///
/// The sampled graph is treated as a point on the probability simplex, so
/// the same routine also differentiates soft states.
pub fn loss_and_gradient(g0_hat: &GraphState, spec: &GuidanceSpec, vocab: &Vocabulary) -> (f64, GuidanceGradient) {
    let residual = spec.function.eval(g0_hat, vocab) - spec.target;
    let grad = spec.function.partials(g0_hat, vocab).scale(2.0 * residual);
    (residual * residual, grad)
}

/// Averages [`loss_and_gradient`] over `spec.samples` clean graphs drawn from `p_hat`.
pub fn estimate_guidance_gradient<R: Rng + ?Sized>(
    p_hat: &DenoiserOutput,
    spec: &GuidanceSpec,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<GuidanceGradient> {
    let p = &p_hat.probs;
    let mut total = GuidanceGradient::zeros(p.n(), p.atom_categories(), p.edge_categories());
    for _ in 0..spec.samples {
        let draw = p.sample_discrete(rng)?;
        total.add_assign(&loss_and_gradient(&draw, spec, vocab).1);
    }
    Ok(total.scale(1.0 / spec.samples as f64))
}

fn step_row(row: &[f64], grad: &[f64], lambda: f64, projection: GradientProjection, out: &mut [f64]) {
    let shift = match projection {
        GradientProjection::Tangent => grad.iter().sum::<f64>() / grad.len() as f64,
        GradientProjection::Raw => 0.0,
    };
    for ((o, &p), &g) in out.iter_mut().zip(row).zip(grad) {
        *o = p - lambda * (g - shift);
    }
}

/// Additive guided update of a soft state: `project(P − λ ∇)` per row and
/// upper-triangle fiber. Rows whose mass is annihilated keep their
/// unguided values. `λ = 0` returns the input unchanged.
pub fn guide_state_with(
    p: &GraphState,
    grad: &GuidanceGradient,
    lambda: f64,
    projection: GradientProjection,
) -> GraphState {
    if lambda == 0.0 {
        return p.clone();
    }
    let (n, a, b) = (p.n(), p.atom_categories(), p.edge_categories());
    let mut out = p.clone();
    let mut raw = vec![0.0; a.max(b)];
    for i in 0..n {
        let row = p.node_row(i);
        step_row(row, grad.node(i), lambda, projection, &mut raw[..a]);
        out.set_node_row(i, &project_row(&raw[..a], Some(row)));
        for j in i + 1..n {
            let fiber = p.edge_fiber(i, j);
            step_row(fiber, grad.edge(i, j), lambda, projection, &mut raw[..b]);
            out.set_edge_fiber(i, j, &project_row(&raw[..b], Some(fiber)));
        }
    }
    out
}

/// [`guide_state_with`] using the tangent projection.
pub fn guide_state(p: &GraphState, grad: &GuidanceGradient, lambda: f64) -> GraphState {
    guide_state_with(p, grad, lambda, GradientProjection::Tangent)
}

/// Guided clean-graph estimate; see [`guide_state_with`].
pub fn apply_guidance(p_hat: &DenoiserOutput, grad: &GuidanceGradient, lambda: f64) -> DenoiserOutput {
    DenoiserOutput::new(guide_state(&p_hat.probs, grad, lambda))
}

pub fn apply_guidance_with(
    p_hat: &DenoiserOutput,
    grad: &GuidanceGradient,
    lambda: f64,
    projection: GradientProjection,
) -> DenoiserOutput {
    DenoiserOutput::new(guide_state_with(&p_hat.probs, grad, lambda, projection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{qm9_heavy_vocab, AtomVocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(atoms: &[usize], bonds: &[(usize, usize, usize)]) -> GraphState {
        GraphState::from_discrete(atoms, bonds, 4, 4).unwrap()
    }

    #[test]
    fn proportion_examples() {
        assert_eq!(eval_atom_proportion(&graph(&[0, 0, 0, 2], &[]), 0), 0.75);
        assert_eq!(eval_atom_proportion(&graph(&[0, 0, 0], &[(0, 1, 1)]), 0), 1.0);
        let soft = GraphState::filled(1, &[0.25; 4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(eval_atom_proportion(&soft, 0), 0.25);
    }

    #[test]
    fn weight_examples() {
        let v = qm9_heavy_vocab();
        let w = eval_molecular_weight(&graph(&[0, 0, 2], &[(0, 1, 1), (1, 2, 1)]), &v);
        assert!((w - 40.021).abs() < 1e-12);
        assert!((eval_molecular_weight(&graph(&[3], &[]), &v) - 18.998).abs() < 1e-12);

        let mut zero = v.clone();
        zero.atoms =
            AtomVocabulary::new(v.atoms.symbols().to_vec(), vec![0.0; 4], v.atoms.max_valences().to_vec()).unwrap();
        assert_eq!(eval_molecular_weight(&graph(&[0, 1, 3], &[]), &zero), 0.0);
    }

    #[test]
    fn proportion_gradient_example() {
        let v = qm9_heavy_vocab();
        let spec = GuidanceSpec::new(PropertyFunction::AtomProportion { atom: 0 }, 1.0, 1.0, 1).unwrap();
        let (loss, grad) = loss_and_gradient(&graph(&[0, 0, 0, 2], &[]), &spec, &v);
        assert!((loss - 0.0625).abs() < 1e-15);
        for i in 0..4 {
            assert!((grad.node(i)[0] + 0.125).abs() < 1e-15);
            assert_eq!(&grad.node(i)[1..], &[0.0, 0.0, 0.0]);
        }
        assert!(grad.ge.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn weight_gradient_vanishes_at_target() {
        let v = qm9_heavy_vocab();
        let g = graph(&[0, 0, 2], &[(0, 1, 1)]);
        let spec = GuidanceSpec::new(PropertyFunction::MolecularWeight, 40.021, 1.0, 1).unwrap();
        let (loss, grad) = loss_and_gradient(&g, &spec, &v);
        assert!(loss < 1e-20);
        assert!(grad.gx.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn one_hot_estimate_is_deterministic() {
        let v = qm9_heavy_vocab();
        let g = graph(&[0, 1, 2], &[(0, 1, 1)]);
        let p = DenoiserOutput::new(g.clone());
        let spec = GuidanceSpec::new(PropertyFunction::MolecularWeight, 30.0, 1.0, 5).unwrap();
        let est = estimate_guidance_gradient(&p, &spec, &v, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (_, exact) = loss_and_gradient(&g, &spec, &v);
        for (a, b) in est.gx.iter().zip(&exact.gx) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_guidance_examples() {
        // zero-sum gradients, so both projections agree
        let p = DenoiserOutput::new(GraphState::filled(1, &[0.7, 0.3], &[1.0, 0.0]));
        let mut g = GuidanceGradient::zeros(1, 2, 2);
        assert_eq!(apply_guidance(&p, &g, 0.0), p);

        g.gx = vec![0.5, -0.5];
        let out = apply_guidance(&p, &g, 1.0);
        assert!((out.node_row(0)[0] - 0.2).abs() < 1e-15);
        assert!((out.node_row(0)[1] - 0.8).abs() < 1e-15);

        g.gx = vec![1.0, -1.0];
        assert_eq!(apply_guidance(&p, &g, 1.0).node_row(0), &[0.0, 1.0]);
    }

    #[test]
    fn annihilated_row_keeps_unguided_values() {
        let p = DenoiserOutput::new(GraphState::filled(1, &[1.0, 0.0], &[1.0, 0.0]));
        let mut g = GuidanceGradient::zeros(1, 2, 2);
        g.gx = vec![5.0, 5.0];
        assert_eq!(apply_guidance_with(&p, &g, 1.0, GradientProjection::Raw).node_row(0), &[1.0, 0.0]);
        // a shared shift carries no tangent component
        assert_eq!(apply_guidance(&p, &g, 1.0).node_row(0), &[1.0, 0.0]);
    }

    #[test]
    fn tangent_update_moves_mass_towards_lighter_atoms() {
        let v = qm9_heavy_vocab();
        // a uniformly positive weight gradient: raw clamping only sharpens, tangent favours carbon
        let p = DenoiserOutput::new(GraphState::filled(1, &[0.1, 0.1, 0.7, 0.1], &[1.0, 0.0, 0.0, 0.0]));
        let spec = GuidanceSpec::new(PropertyFunction::MolecularWeight, 12.0, 0.01, 1).unwrap();
        let (_, grad) = loss_and_gradient(&GraphState::from_discrete(&[2], &[], 4, 4).unwrap(), &spec, &v);
        let raw = apply_guidance_with(&p, &grad, 0.001, GradientProjection::Raw);
        let tangent = apply_guidance(&p, &grad, 0.001);
        assert!(raw.node_row(0)[0] < 0.1 && raw.node_row(0)[2] > 0.7);
        assert!(tangent.node_row(0)[0] > 0.1 && tangent.node_row(0)[3] < 0.1);
    }

    #[test]
    fn bond_guidance_touches_edges_symmetrically() {
        let v = qm9_heavy_vocab();
        let p = DenoiserOutput::new(GraphState::filled(3, &[0.25; 4], &[0.7, 0.2, 0.05, 0.05]));
        let spec = GuidanceSpec::new(PropertyFunction::BondCount, 3.0, 0.05, 1).unwrap();
        let g0 = graph(&[0, 0, 0], &[]);
        let (_, grad) = loss_and_gradient(&g0, &spec, &v);
        let out = apply_guidance(&p, &grad, spec.lambda);
        out.validate().unwrap();
        assert!(out.edge_fiber(0, 1)[0] < 0.7);
        assert_eq!(out.edge_fiber(0, 1), out.edge_fiber(1, 0));
    }

    #[test]
    fn spec_validation() {
        let f = PropertyFunction::AtomProportion { atom: 0 };
        assert!(GuidanceSpec::new(f, 1.5, 1.0, 1).is_err());
        assert!(GuidanceSpec::new(f, 0.5, -1.0, 1).is_err());
        assert!(GuidanceSpec::new(f, 0.5, 1.0, 0).is_err());
        assert!(GuidanceSpec::new(PropertyFunction::MolecularWeight, 135.0, 0.2, 1).is_ok());
    }
}
