use thiserror::Error;

/// Errors surfaced by the localization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Pitch within numerical reach of ±π/2; Euler angles are not recoverable.
    #[error("gimbal lock: |cos(pitch)| below tolerance, angles not recoverable")]
    GimbalLock,

    #[error("measurement graph disconnected: node {0} unreachable")]
    DisconnectedGraph(usize),

    #[error("degenerate anchor geometry: {0}")]
    DegenerateAnchorGeometry(String),

    #[error("singular normal matrix in {0}")]
    SingularNormalMatrix(&'static str),

    #[error("degenerate tag layout: {0}")]
    DegenerateLayout(String),

    #[error("singular Fisher information: {0}")]
    SingularInformation(String),

    #[error("availability condition not met: {0}")]
    Unavailable(String),
}

pub type Result<T> = std::result::Result<T, Error>;
