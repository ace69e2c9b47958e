use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller input: out-of-range token ids, mismatched shapes, empty shards.
    #[error("input error: {0}")]
    Input(String),

    /// The model or a plan violates a structural invariant.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The minimal one-expert-per-layer submodel does not fit the client's budget.
    #[error("client {client_id} infeasible: minimal submodel needs {needed} bytes, budget allows {available} (deficit {deficit} bytes)")]
    Infeasible {
        client_id: usize,
        needed: u64,
        available: u64,
        deficit: u64,
    },

    #[error("no same-task donor profile for client {0}")]
    NoDonor(usize),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("exhaustive search guard: L*E = {0} exceeds 16")]
    TooLarge(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
