//! Reverse process: prior draws, the marginalized one-step reverse
//! distribution and the full generation loop with an optional guidance hook.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::graph::GraphState;
use crate::guidance::{apply_guidance_with, estimate_guidance_gradient, guide_state_with, GuidanceSpec};
use crate::noise::NoiseModel;
use crate::vocab::Vocabulary;

/// `p(x_i^{t−1} | G^t)` and `p(e_ij^{t−1} | G^t)` for every node and edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseStepDistribution {
    pub probs: GraphState,
}

/// Where the guided update is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidePlacement {
    /// Adjust the clean-graph estimate before marginalization.
    #[default]
    X0,
    /// Adjust the reverse-step distribution of `x^{t−1}` directly.
    Xtm1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Guide {
    pub spec: GuidanceSpec,
    pub placement: GuidePlacement,
}

/// Independent random streams for one generated sample. Guidance draws
/// come from their own stream so the reverse chain consumes the same
/// numbers whether or not guidance is active.
#[derive(Debug, Clone)]
pub struct SampleStreams {
    pub chain: ChaCha8Rng,
    pub guide: ChaCha8Rng,
}

impl SampleStreams {
    pub fn from_seed(seed: u64) -> Self {
        let chain = ChaCha8Rng::seed_from_u64(seed);
        let mut guide = ChaCha8Rng::seed_from_u64(seed);
        guide.set_stream(1);
        Self { chain, guide }
    }
}

/// Node rows from `m_X`, upper-triangle fibers from `m_E`, mirrored.
pub fn sample_prior(n: usize, nm: &NoiseModel, rng: &mut ChaCha8Rng) -> Result<GraphState> {
    if n == 0 {
        return Err(Error::Config("node count must be at least 1".into()));
    }
    GraphState::filled(n, nm.m_x(), nm.m_e()).sample_discrete(rng)
}

fn mix<'a>(posterior: impl Fn(usize) -> Option<&'a [f64]>, p_hat: &[f64], out: &mut [f64]) -> f64 {
    out.fill(0.0);
    for (x0, &w) in p_hat.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        if let Some(q) = posterior(x0) {
            for (o, &qk) in out.iter_mut().zip(q) {
                *o += w * qk;
            }
        }
    }
    out.iter().sum()
}

/// `Σ_x q(x^{t−1} | x⁰ = x, x^t) p̂(x)`, dropping clean categories that
/// cannot produce the observation and renormalizing what survives.
pub fn reverse_step_distribution(
    gt: &GraphState,
    t: usize,
    dn: &DenoiserOutput,
    nm: &NoiseModel,
) -> Result<ReverseStepDistribution> {
    if t == 0 || t > nm.steps() {
        return Err(Error::Config(format!("timestep {t} outside 1..={}", nm.steps())));
    }
    let (n, a, b) = (gt.n(), gt.atom_categories(), gt.edge_categories());
    let mut probs = GraphState::filled(n, &vec![0.0; a], &vec![0.0; b]);
    let mut row = vec![0.0; a];
    let mut fiber = vec![0.0; b];
    for i in 0..n {
        let xt = gt.atom_type(i);
        let mass = mix(|x0| nm.node_posterior(t, x0, xt), dn.node_row(i), &mut row);
        if !(mass > 0.0) {
            return Err(Error::DeadReverseStep { t, site: format!("node {i}") });
        }
        row.iter_mut().for_each(|v| *v /= mass);
        probs.set_node_row(i, &row);
        for j in i + 1..n {
            let et = gt.edge_type(i, j);
            let mass = mix(|e0| nm.edge_posterior(t, e0, et), dn.edge_fiber(i, j), &mut fiber);
            if !(mass > 0.0) {
                return Err(Error::DeadReverseStep { t, site: format!("edge ({i}, {j})") });
            }
            fiber.iter_mut().for_each(|v| *v /= mass);
            probs.set_edge_fiber(i, j, &fiber);
        }
    }
    Ok(ReverseStepDistribution { probs })
}

/// Runs the reverse chain from a prior draw at `t = T` down to `t = 1`.
pub fn generate(
    n: usize,
    nm: &NoiseModel,
    dn: &Denoiser,
    guide: Option<&Guide>,
    vocab: &Vocabulary,
    streams: &mut SampleStreams,
) -> Result<GraphState> {
    let mut gt = sample_prior(n, nm, &mut streams.chain)?;
    for t in (1..=nm.steps()).rev() {
        gt = reverse_step(&gt, t, nm, dn, guide, vocab, streams)
            .map_err(|e| Error::AtStep { t, source: Box::new(e) })?;
    }
    Ok(gt)
}

fn reverse_step(
    gt: &GraphState,
    t: usize,
    nm: &NoiseModel,
    dn: &Denoiser,
    guide: Option<&Guide>,
    vocab: &Vocabulary,
    streams: &mut SampleStreams,
) -> Result<GraphState> {
    let p_hat = dn.denoise(gt, t, nm)?;
    let step = match guide {
        None => reverse_step_distribution(gt, t, &p_hat, nm)?,
        Some(g) => {
            let grad = estimate_guidance_gradient(&p_hat, &g.spec, vocab, &mut streams.guide)?;
            let lambda = g.spec.lambda_at(t);
            match g.placement {
                GuidePlacement::X0 => {
                    let guided = apply_guidance_with(&p_hat, &grad, lambda, g.spec.projection);
                    reverse_step_distribution(gt, t, &guided, nm)?
                }
                GuidePlacement::Xtm1 => {
                    let step = reverse_step_distribution(gt, t, &p_hat, nm)?;
                    ReverseStepDistribution { probs: guide_state_with(&step.probs, &grad, lambda, g.spec.projection) }
                }
            }
        }
    };
    debug_assert!(step.probs.validate().is_ok(), "reverse step broke state invariants");
    step.probs.sample_discrete(&mut streams.chain)
}
