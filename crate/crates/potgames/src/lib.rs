//! Learning the rationality parameters of quadratic potential games from
//! observed Nash equilibria.
//!
//! Agents play a simultaneous non-cooperative game whose Nash equilibria are
//! the minimizers of a convex quadratic potential `½xᵀR(θ,μ)x + c(θ,μ)ᵀx`
//! over a polyhedron `A(μ)x ≤ b(μ)` (with optional equality rows). `θ` is the
//! unknown rationality parameter vector, `μ` the observable context. Given a
//! dataset of `(x̄, μ̄)` pairs, the learner runs a stochastic first-order loop:
//! sample a datapoint, compute its exact equilibrium with an active-set QP
//! solver, fix the active set, and differentiate the equilibrium map through
//! the resulting KKT linear system to update `θ`.
//!
//! Module map:
//! - [`model`]: the parametrized game form and the concrete quadratic problem.
//! - [`qp`]: primal active-set QP solver with certified KKT residuals.
//! - [`diffgrad`]: active-set KKT systems, loss, and implicit gradients.
//! - [`rules`]: degeneracy detection and the two disambiguation rules.
//! - [`learner`]: the stochastic training loop, schedules, and run logs.
//! - [`games`]: Cournot and congestion game builders plus dataset synthesis.
//! - [`verify`]: independent oracles (finite differences, brute-force
//!   enumeration, grid search).
//! - [`fileio`]: the versioned plain-text file formats.

pub mod diffgrad;
pub mod fileio;
pub mod games;
pub mod learner;
mod linalg;
pub mod model;
pub mod qp;
pub mod rules;
pub mod verify;

use thiserror::Error;

/// Errors produced by the solver, gradient, and game-construction paths.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, got {actual}")]
    Dimension {
        field: &'static str,
        expected: String,
        actual: String,
    },
    #[error("parameter index {index} out of range (theta_dim = {dim})")]
    ParamIndex { index: usize, dim: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    #[error("ill-conditioned solve: {0}")]
    IllConditioned(String),
    #[error("singular active-set system{}", datapoint.map(|k| format!(" at datapoint {k}")).unwrap_or_default())]
    SingularSystem { datapoint: Option<usize> },
    #[error("invalid active sets: {0}")]
    ActiveSets(String),
    #[error("degenerate set is empty")]
    EmptyDegenerateSet,
    #[error("commodity {agent} has no directed path {from} -> {to}")]
    DisconnectedCommodity {
        agent: usize,
        from: usize,
        to: usize,
    },
    #[error("graph sampling failed: {0}")]
    GraphSampling(String),
    #[error("empty dataset or split: {0}")]
    EmptyData(String),
    #[error("assumption check failed: {0}")]
    Assumptions(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("solver failure at iteration {iteration}, datapoint {datapoint}: {source}")]
    Training {
        iteration: usize,
        datapoint: usize,
        #[source]
        source: Box<Error>,
        /// Text dump of the failing problem, for offline reproduction.
        dump: Option<String>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
