//! Exact and asymptotic metastable exit times for mean-field spin chains
//! whose energy depends on the configuration only through a finite family
//! of pattern overlaps.
//!
//! The crate is organized bottom-up:
//!
//! * [`disorder`]: pattern ensembles over a finite alphabet and their exact
//!   type decomposition (the columns of the pattern matrix take finitely
//!   many values; sites are grouped by column value).
//! * [`model`]: the energy `H(sigma) = -n v(X(sigma))`, spin configurations,
//!   and the lumped lattice of per-type up-spin counts.
//! * [`ldp`]: quenched rate function for the overlap/occupation variables,
//!   its Legendre machinery, stationary weights, and transition rates of the
//!   lumped chain.
//! * [`chain`]: explicit state enumeration for the lumped chain and, at tiny
//!   sizes, the full spin chain (used to certify the lumping).
//! * [`potential`]: exact potential-theoretic quantities on the lumped
//!   lattice: harmonic functions, capacities, mean hitting times.
//! * [`asymptotics`]: critical points of the rate function, gates, saddle
//!   eigendata, and sharp large-`n` formulas for capacities and mean exit
//!   times.
//! * [`mc`]: Monte Carlo simulation of the lumped chain for independent
//!   validation of hitting-time statistics.

pub mod chain;
pub mod disorder;
pub mod ldp;
pub mod model;
pub mod numeric;
pub mod asymptotics;
pub mod mc;
pub mod potential;

pub use disorder::{PatternDistribution, PatternEnsemble, TypeTable};
pub use model::{LatticePoint, Potential, SpinConfig};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("state space too large: {actual} states exceeds budget {budget}")]
    StateBudget { actual: u64, budget: u64 },
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error("optimization failed to converge: {0}")]
    NoConvergence(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("infeasible point: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
