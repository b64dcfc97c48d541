use thiserror::Error;

#[derive(Debug, Error)]
pub enum OidError {
    #[error("invalid line parameters: {0}")]
    InvalidLine(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("invalid dispatch spec: {0}")]
    Spec(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("solver failed with status {status}")]
    Solver { status: oid_conic::Status },
    #[error(transparent)]
    Conic(#[from] oid_conic::SolverError),
    #[error("relaxation not tight: eigenvalue ratio {ratio:.3e}")]
    NotTight { ratio: f64 },
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    PowerFlow { iterations: usize, mismatch: f64 },
    #[error("missing duals: {0}")]
    MissingDuals(String),
}

pub type Result<T, E = OidError> = std::result::Result<T, E>;
