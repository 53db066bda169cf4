use thiserror::Error;

/// Errors raised across the diffusion engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown atom symbol `{0}`")]
    UnknownAtom(String),

    #[error("unknown bond category {0}")]
    UnknownBond(usize),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("invalid graph state: {0}")]
    InvalidState(String),

    #[error("row {index} sums to {sum}, expected 1")]
    NotNormalized { index: String, sum: f64 },

    #[error("no dataset graph with {0} nodes")]
    NoSizeMatch(usize),

    #[error("every dataset graph has zero likelihood for the noisy graph at t={0}")]
    ZeroEvidence(usize),

    #[error("reverse step at t={t} has no surviving mass for {site}")]
    DeadReverseStep { t: usize, site: String },

    #[error("at t={t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("malformed molfile: {0}")]
    Molfile(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
