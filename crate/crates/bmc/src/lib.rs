//! Cluster recovery in block Markov chains (BMCs).
//!
//! A BMC is a Markov chain on `n` states partitioned into `K` clusters, where
//! all states in a cluster share the same block-level transition probabilities
//! `p` spread uniformly over the destination clusters. This crate provides
//! everything needed to study cluster recovery from a single sample path:
//!
//! - [`model`] — model construction and validation, state-level kernels,
//!   exact and limiting stationary distributions, mixing-time bounds;
//! - [`simulate`] — equilibrium-start trajectory simulation and reduction to
//!   transition-count matrices;
//! - [`info`] — the information quantity `I(α,p)` that governs detectability,
//!   the separability quantity `D(α,p)`, the zero-information condition, and
//!   the balanced-perturbation construction behind the recovery lower bound;
//! - [`spectral`] — stage-1 recovery: trimming, rank-`K` approximation of the
//!   count matrix, and clustering of its row/column profiles;
//! - [`improve`] — stage-2 recovery: likelihood-based reassignment of every
//!   state given parameter estimates from the current partition;
//! - [`eval`] — misclassification counting under the optimal label matching;
//! - [`experiment`] — a seeded, parallel experiment harness with CSV outputs.

pub mod eval;
pub mod experiment;
pub mod improve;
pub mod info;
pub mod model;
pub mod simulate;
pub mod spectral;

pub use eval::{baseline_rates, misclassification, ErrorReport};
pub use model::{
    build_transition_matrix, mixing_time_bound, solve_stationary_block, solve_stationary_exact,
    BmcModel, Partition, StateKernel,
};
pub use simulate::{
    count_matrix, expected_count_matrix, simulate_counts, simulate_trajectory, CountMatrix,
    Trajectory,
};

/// Errors produced by model construction, simulation, and recovery.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or cluster counts of two inputs disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A cluster is too small for the state-level kernel to be defined.
    #[error("cluster {k} has {size} state(s); at least 2 are required")]
    ClusterTooSmall { k: usize, size: usize },
    /// The block matrix is not irreducible.
    #[error("block transition matrix is reducible; no unique stationary distribution")]
    Reducible,
    /// A stationary-distribution solve degenerated.
    #[error("stationary linear system is singular or badly conditioned")]
    SingularSystem,
    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    DomainError(String),
    /// An operation on a cluster pair received twice the same cluster.
    #[error("cluster pair must consist of two distinct clusters")]
    SamePair,
    /// Bisection for the balanced perturbation found no bracketing interval.
    #[error("no sign change on [0,1]; balanced perturbation is not bracketed")]
    NoSignChange,
    /// A trajectory references a state outside `0..n`.
    #[error("state {state} out of range for n = {n}")]
    StateOutOfRange { state: usize, n: usize },
    /// A cluster required to be nonempty is empty.
    #[error("cluster {k} is empty")]
    EmptyCluster { k: usize },
    /// The SVD routine did not converge.
    #[error("singular value decomposition failed: {0}")]
    SvdFailure(String),
    /// A model file or constructor argument violates an invariant.
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    /// File I/O failed.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    /// A model or trajectory file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
    /// A harness trial failed; the seed reproduces it in isolation.
    #[error("trial with seed {seed} failed: {source}")]
    Trial {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach the trial seed that produced this error.
    pub fn with_seed(self, seed: u64) -> Error {
        Error::Trial {
            seed,
            source: Box::new(self),
        }
    }

    /// Whether the error stems from invalid input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::DimensionMismatch(_)
            | Error::ClusterTooSmall { .. }
            | Error::Reducible
            | Error::DomainError(_)
            | Error::SamePair
            | Error::StateOutOfRange { .. }
            | Error::EmptyCluster { .. }
            | Error::InvalidField { .. }
            | Error::Parse(_) => true,
            Error::Trial { source, .. } => source.is_validation(),
            Error::SingularSystem
            | Error::NoSignChange
            | Error::SvdFailure(_)
            | Error::Io { .. } => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
