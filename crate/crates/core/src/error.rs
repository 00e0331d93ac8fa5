use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid game specification: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diverged at node {node} ({what})")]
    Divergence { what: String, node: usize },

    #[error("second moment not positive semidefinite at node {node}: min eigenvalue {min_eigenvalue:e}")]
    NotPsd { node: usize, min_eigenvalue: f64 },

    #[error("time {t} outside grid [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },

    #[error("{flagged} of {total} Monte Carlo paths were non-finite (limit 1%)")]
    TooManyFlaggedPaths { flagged: usize, total: usize },

    #[error("derivative callback `{callback}` failed the finite-difference self-test: relative error {rel_err:e}")]
    DerivativeSelfTest { callback: String, rel_err: f64 },

    #[error("cost Hessians not symmetric between agents {i} and {j} at point {point:?} (gap {gap:e})")]
    HessianAsymmetry {
        i: usize,
        j: usize,
        point: Vec<f64>,
        gap: f64,
    },

    #[error("game is not a potential game: {0}")]
    NotPotential(String),

    #[error("line search stalled after {halvings} halvings at iteration {iteration} (potential {potential:e}, gradient norm {grad_norm:e})")]
    LineSearchStall {
        iteration: usize,
        halvings: usize,
        potential: f64,
        grad_norm: f64,
    },

    #[error("parse error in {field}: {message}")]
    Parse { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
