//! Discrete graph diffusion with training-free guidance.
//!
//! Molecular graphs are categorical: every node carries an atom type and
//! every node pair an edge type (including "no bond"). The forward process
//! mixes each category with the dataset marginal; the reverse process
//! marginalizes a clean-graph prediction through the exact single-step
//! posterior. Guidance nudges the clean-graph prediction along the negative
//! gradient of a property loss and projects back onto the simplex.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod graph;
pub mod guidance;
pub mod harness;
pub mod noise;
pub mod sampler;
pub mod validity;
pub mod vocab;

pub use dataset::{compute_marginals, generate_synthetic_dataset, load_dataset, GraphDataset};
pub use denoiser::{
    bayes_denoise, marginal_denoise, softmax_denoise, train_softmax_denoiser, BayesDenoiser, Denoiser, DenoiserOutput,
    SoftmaxDenoiserParams, TrainConfig,
};
pub use error::{Error, Result};
pub use graph::{CategoryDistribution, GraphState, Mode};
pub use guidance::{
    apply_guidance, estimate_guidance_gradient, loss_and_gradient, GradientProjection, GuidanceGradient, GuidanceSpec,
    PropertyFunction,
};
pub use harness::{run_sweep, summarize, Generator, NodeCount, SweepConfig, SweepRow};
pub use noise::{posterior_step, transition_matrix, NoiseModel, NoiseSchedule, Posterior};
pub use sampler::{generate, reverse_step_distribution, sample_prior, Guide, GuidePlacement, SampleStreams};
pub use validity::{check_validity, read_molfile, write_molfile, ValidityReport};
pub use vocab::{qm9_heavy_vocab, AtomVocabulary, EdgeVocabulary, Vocabulary};
