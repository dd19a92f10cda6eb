//! D-efficient treatment/control allocation for multiple controlled
//! experiments that share one subject pool.
//!
//! When the same N subjects participate in K experiments, a per-subject
//! random effect correlates their responses across experiments, and subject
//! covariates confound treatment effects unless balanced. Modeling the
//! experiments jointly, the precision matrix of the GLS treatment-effect
//! estimates is an explicit function of the K allocation vectors, and
//! designs can be chosen to maximize its determinant's K-th root
//! (D-efficiency). Good designs balance covariates within each experiment
//! and keep allocations mutually orthogonal across experiments.
//!
//! The crate provides:
//!
//! - [`model`]: the precision matrix in closed form, an independent
//!   oracle for it built from the stacked GLS system, D-efficiency,
//!   per-experiment variances, and closed-form benchmarks and bounds;
//! - [`designs`]: five construction methods (random, Plackett-Burman,
//!   single-SDP randomized, greedy with SDP subproblems, greedy with
//!   deterministic local search);
//! - [`sdp`]: the diagonal-constrained SDP relaxation, hyperplane rounding,
//!   and seeded randomness;
//! - [`sim`]: response simulation, GLS estimation, and a factorial
//!   simulation study harness;
//! - [`numerics`]: the small dense linear-algebra kernels everything else
//!   uses.

pub mod designs;
pub mod error;
pub mod model;
pub mod numerics;
pub mod sdp;
pub mod sim;

pub use designs::{DesignMethod, DesignRequest};
pub use error::{Error, Result};
pub use model::{
    AllocationSet, Benchmarks, CovariateMatrix, ModelConstants, NoiseSpec, PrecisionMatrix,
};
pub use numerics::Matrix;
pub use sdp::{RandomSource, SdpProblem, SdpSolution};
pub use sim::{ReplicationRecord, SimulationConfig, SummaryRow};
