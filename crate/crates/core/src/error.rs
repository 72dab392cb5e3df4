use thiserror::Error;

/// Errors raised by the engine.
///
/// Validation failures are reported eagerly with the offending value so that
/// configuration layers can surface them verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tree too large: {steps} steps x {dim} noise dims = {} exceeds the path-mode cap of {cap}", steps * dim)]
    TreeTooLarge { steps: usize, dim: usize, cap: usize },

    #[error("level {level} out of range for a tree with {steps} steps")]
    LevelOutOfRange { level: usize, steps: usize },

    #[error("node {node} out of range at level {level} ({len} nodes)")]
    NodeOutOfRange { level: usize, node: usize, len: usize },

    #[error("path-dependent evaluation requires a path-mode tree")]
    PathModeRequired,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("problem validation failed: {0}")]
    ProblemValidation(String),

    #[error("structure condition violated: {0}")]
    Structure(String),

    #[error("enumeration of {count} candidates exceeds the cap of {cap}")]
    EnumerationCap { count: f64, cap: u64 },

    #[error("CFL condition violated: time step {dt:.3e} exceeds the maximum stable step {max_dt:.3e}")]
    Cfl { dt: f64, max_dt: f64 },

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("out of scope: {0}")]
    OutOfScope(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}
