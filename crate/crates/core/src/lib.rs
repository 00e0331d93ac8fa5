//! Verification and equilibrium toolkit for N-agent linear-quadratic
//! stochastic differential games.
//!
//! The crate computes linear derivatives of agents' value functions with
//! respect to their feedback policies (by backward matrix ODEs and by
//! sensitivity-process Monte Carlo), decides whether a game is a potential
//! game through the symmetric-Jacobian test, builds potential functions,
//! and finds Nash equilibria by minimising the potential.

pub mod error;
pub mod game;
pub mod cli;
pub mod crosscheck;
pub mod general;
pub mod grid;
pub mod io;
pub mod mc;
pub mod nash;
pub mod ode;
pub mod potential;
pub mod report;
pub mod seed;

pub use error::{Error, Result};
pub use game::{LqGameSpec, PolicyProfile};
pub use grid::{MatrixSeries, ScalarSeries, TimeGrid};
