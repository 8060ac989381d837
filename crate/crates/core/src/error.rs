//! Error type shared by the estimation pipeline.

use thiserror::Error;

/// Errors surfaced by dataset construction, smoothing, and the solvers.
///
/// Numeric diagnostics are reported as `f64` regardless of the scalar type the
/// computation ran in.
#[derive(Debug, Error)]
pub enum Error {
    /// Dataset rows violated a structural invariant (dimensions, finiteness, ...).
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    /// A delimited input file could not be parsed.
    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    /// Reduced index vector left the open unit ball.
    #[error("reduced index vector has norm {norm} but must have norm < 1")]
    ReducedNormTooLarge { norm: f64 },

    /// No usable anchor coordinate (all initial index coefficients are zero).
    #[error("cannot choose an anchor coordinate: initial index coefficients are all zero")]
    ZeroAnchor,

    /// Local linear system is singular at an evaluation point.
    #[error(
        "local linear smoother degenerate at t = {t}: denominator {denominator} below threshold"
    )]
    DegenerateSmoother { t: f64, denominator: f64 },

    /// Smoother degeneracy encountered while assembling a subject's score columns.
    #[error("smoother degenerate for subject {subject} at row {row} (t = {t})")]
    DegenerateAtObservation { subject: String, row: usize, t: f64 },

    /// Every candidate bandwidth was degenerate at every evaluation point.
    #[error("bandwidth selection failed: all {grid_len} candidate bandwidths were degenerate everywhere")]
    BandwidthSelection { grid_len: usize },

    /// A correlation parameter left the positive-definite range for the structure.
    #[error("correlation parameter {rho} outside the positive-definite range for {structure} with clusters of size {m}")]
    CorrelationDomain { rho: f64, structure: String, m: usize },

    /// Moment estimation of the correlation parameter had no usable pairs.
    #[error("cannot estimate the correlation parameter: no subject has at least two observations")]
    NoCorrelationPairs,

    /// Basis expansion undefined for the requested structure/cluster size.
    #[error("no {structure} basis matrices for clusters of size {m}")]
    BasisUndefined { structure: String, m: usize },

    /// Initial least-squares system is rank deficient.
    #[error("initial least-squares fit is rank deficient in the {block} block")]
    RankDeficientInit { block: String },

    /// Working covariance matrix could not be inverted for a subject.
    #[error("working covariance matrix singular for subject {subject}")]
    SingularCovariance { subject: String },

    /// Fisher information (or penalized curvature) singular beyond the ridge fallback.
    #[error("information matrix singular even after ridge fallback; consider a larger kernel ridge or a different anchor coordinate")]
    SingularInformation,

    /// Weighting matrix of the quadratic inference function singular beyond its ridge.
    #[error("QIF weighting matrix singular beyond ridge (smallest eigenvalue {min_eigenvalue})")]
    SingularWeighting { min_eigenvalue: f64 },

    /// Sensitivity matrix of the quadratic inference function is rank deficient.
    #[error("QIF sensitivity matrix has rank {rank} but needs {needed}")]
    QifRankDeficient { rank: usize, needed: usize },

    /// A marginal variance estimate was not strictly positive.
    #[error("nonpositive marginal variance for subject {subject}")]
    NonpositiveVariance { subject: String },

    /// Configuration rejected before any computation ran.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Tuning failed at every grid point.
    #[error("selection failed at every (lambda1, lambda2) grid point; first failure: {first_failure}")]
    AllGridPointsFailed { first_failure: String },

    /// Too many replications of a simulation study failed.
    #[error("{failed} of {total} replications failed (more than {limit_percent}%); first failure: {first_failure}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit_percent: u8,
        first_failure: String,
    },

    /// An I/O failure while reading or writing run artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
