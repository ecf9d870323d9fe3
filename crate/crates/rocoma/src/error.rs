use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure modes callers are
/// expected to distinguish; everything else is a `Config` or `Io` wrap.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimensions must be positive")]
    EmptyGrid,

    #[error("no charging infrastructure: every region has zero chargers")]
    NoChargers,

    #[error("weights must form a probability vector: {0}")]
    BadSimplex(String),

    #[error("action shape does not match grid neighborhoods: {0}")]
    ActionGridMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("critic has not been fitted yet")]
    CriticNotFitted,

    #[error("critic fitting diverged: {0}")]
    CriticDiverged(String),

    #[error("checkpoint does not match the current setup: {0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("reports are not comparable: {0}")]
    IncomparableReports(String),

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
