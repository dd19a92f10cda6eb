//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the numerical kernels, model operations, and design
/// algorithms.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    /// Cholesky factorization failed, even after diagonal jitter. The input
    /// is indefinite or too far from positive semi-definite.
    #[error("matrix is not factorizable (indefinite input)")]
    NotFactorizable,

    /// The eigensolver did not converge within its sweep budget.
    #[error("eigendecomposition did not converge")]
    NoConvergence,

    /// The covariate matrix has collinear columns (Z'Z is not positive
    /// definite).
    #[error("covariate matrix is rank deficient")]
    RankDeficient,

    /// A matrix that must be invertible is numerically singular, e.g. the
    /// precision of a degenerate design.
    #[error("matrix is numerically singular")]
    Singular,

    /// A closed-form benchmark was requested with per-experiment error
    /// variances that differ; the formulas require equal variances.
    #[error("benchmark requires equal error variances across experiments")]
    UnequalSigmas,

    /// The sub-precision matrix of previously chosen allocations stayed
    /// singular through the whole jitter ladder.
    #[error("greedy sub-precision matrix is singular (degenerate prior allocations)")]
    SingularSubPrecision,

    /// Row normalization collapsed inside the SDP solver, which signals a
    /// cost matrix with catastrophic scale.
    #[error("SDP iterate collapsed during row normalization")]
    InfeasibleNumerics,

    /// Mismatched sizes, e.g. a design family that cannot accommodate the
    /// requested subject or experiment count.
    #[error("incompatible dimensions: {0}")]
    IncompatibleDimensions(String),

    /// A precondition on an argument was violated (non-finite entries,
    /// non-unit vectors, empty inputs, ...).
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    /// Short stable identifier, used as the error marker in study output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NotFactorizable => "not_factorizable",
            Error::NoConvergence => "no_convergence",
            Error::RankDeficient => "rank_deficient",
            Error::Singular => "singular",
            Error::UnequalSigmas => "unequal_sigmas",
            Error::SingularSubPrecision => "singular_sub_precision",
            Error::InfeasibleNumerics => "infeasible_numerics",
            Error::IncompatibleDimensions(_) => "incompatible_dimensions",
            Error::Invalid(_) => "invalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
