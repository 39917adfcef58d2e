use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch at {field}: {detail}")]
    Dimension { field: String, detail: String },
    #[error("matrix {0} is not symmetric")]
    Asymmetric(&'static str),
    #[error("matrix {0} is not positive semidefinite")]
    NotPsd(&'static str),
    #[error("matrix {field} is not positive definite")]
    NotPd { field: String },
    #[error("matrix {0} is singular")]
    Singular(&'static str),
    #[error("pair (A,B) uncontrollable; closed-loop regime classification inapplicable")]
    PbhPreconditionFailed,
    #[error("access probability must be positive to distinguish the controllable regimes")]
    ZeroAccessProbability,
    #[error("input matrix B is zero; no block structure to transform")]
    ZeroInputMatrix,
    #[error("learner diverged at slot {slot}: |P| = {norm:.3e}")]
    LearnerDiverged { slot: usize, norm: f64 },
    #[error("config parse error in {source_name}: {detail}")]
    Parse { source_name: String, detail: String },
    #[error("malformed CSV at line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
