//! Collision-avoiding control for a robot tracking a reference trajectory
//! among moving obstacles whose motion is corrupted by unbounded Gaussian
//! noise.
//!
//! The crate provides:
//! - [`models`]: robot and obstacle dynamics plus rollout utilities,
//! - [`barrier`]: discrete-time barrier functions, the Gaussian moment
//!   matching of the barrier condition, and its deterministic
//!   chance-constraint reformulation,
//! - [`solve`]: an in-house conic interior-point solver and a sequential
//!   convex programming loop for the nonconvex one-shot problem,
//! - [`control`]: nominal MPC, deterministic and chance-constrained
//!   MPC-CBF controllers, and the predictive safety filter,
//! - [`experiments`]: closed-loop simulation and Monte Carlo validation,
//! - [`cli`]: scenario files and the command-line front end.

pub mod barrier;
pub mod cli;
pub mod control;
pub mod experiments;
pub mod models;
pub mod solve;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid configuration in [{section}] {key}: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },
    #[error("solver error: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
