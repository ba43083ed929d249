//! Secret-key generation over RIS-assisted MIMO channels.
//!
//! Two parties (a multi-antenna base station and a single-antenna user) probe
//! a reciprocal wireless channel that is partly direct and partly reflected
//! off a reconfigurable intelligent surface (RIS). The crate covers the whole
//! pipeline:
//!
//! * [`channel`] synthesizes correlated Rician realizations of the direct,
//!   BS-RIS and UE-RIS links and estimates the cascaded-channel covariance.
//! * [`probing`] models the uplink/downlink pilot exchange that turns RIS
//!   phase patterns and receive precoders into least-squares channel
//!   measurements at both parties.
//! * [`skr`] computes the secret-key rate of a measurement design, both in
//!   closed form from covariances and empirically from samples.
//! * [`waterfill`] maximizes the key rate over the ideal (unconstrained)
//!   measurement matrix via concavity-aware water-filling.
//! * [`decompose`] projects the ideal matrix onto the realizable set of
//!   Hadamard phase schedules paired with an orthonormal precoder.
//! * [`sa_design`] optimizes the RIS phase vector for the single-antenna
//!   special case by eigenvector relaxation and randomized rounding.
//! * [`keypipe`] quantizes measurements into key bits and scores them
//!   (bit disagreement ratio, randomness test battery).
//! * [`experiments`] ties everything into reproducible scenario runs and
//!   parameter sweeps behind the `ris-keygen` command line tool.
//!
//! All randomness flows through explicitly seeded ChaCha streams, so every
//! result in the crate is reproducible bit for bit, including the
//! rayon-parallel Monte Carlo estimators. The environment variable
//! `RIS_KEYGEN_THREADS` caps the worker count without affecting results.

// Parameter guards are written `!(x > 0.0)` on purpose: the negation also
// rejects NaN, which `x <= 0.0` would wave through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod decompose;
pub mod experiments;
pub mod keypipe;
pub mod linalg;
pub mod probing;
pub mod sa_design;
pub mod skr;
pub mod waterfill;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs have inconsistent or unsupported dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A matrix that must be positive semidefinite has a significantly
    /// negative eigenvalue.
    #[error("matrix is not positive semidefinite: min eigenvalue {min_eig:.3e} (scale {scale:.3e})")]
    NotPsd { min_eig: f64, scale: f64 },
    /// A sample covariance is too ill-conditioned for a stable log-det.
    #[error("ill-conditioned covariance: condition number {0:.3e}")]
    IllConditioned(f64),
    /// The requested optimization has no feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// An iteration failed to converge within its cap.
    #[error("no convergence: {0}")]
    Convergence(String),
    /// Invalid configuration or parameter value.
    #[error("config error: {0}")]
    Config(String),
    /// Degenerate data (all-zero series, empty inputs, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
