//! Shared error type for the auditing core.

use thiserror::Error;

/// Errors surfaced by the numeric core and the persistence layer.
#[derive(Debug, Error)]
pub enum AuditError {
    /// Operand shapes incompatible for an operation.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A time or index argument outside the schedule's domain.
    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    /// Operation applied to the wrong model/schedule/parameterization kind.
    #[error("kind mismatch: {0}")]
    Kind(String),

    /// A caller-side contract violation (empty set, non-scalar root, NaN input...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Division by a zero noise scale.
    #[error("singular noise scale in {0}")]
    Singularity(&'static str),

    /// Non-finite value produced during iteration.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Adaptive integration failed to reach the end of the interval.
    #[error("integrator failed to converge: {0}")]
    Convergence(String),

    /// Invalid or unknown configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Persistence schema version not understood by this build.
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    /// Malformed persisted file.
    #[error("schema error in {path}: {detail}")]
    Schema { path: String, detail: String },

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AuditError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AuditError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn range(what: &'static str, detail: impl Into<String>) -> Self {
        AuditError::Range {
            what,
            detail: detail.into(),
        }
    }

    /// Stable one-word class name, used by the CLI for machine-parseable output.
    pub fn class(&self) -> &'static str {
        match self {
            AuditError::Shape { .. } => "ShapeError",
            AuditError::Range { .. } => "RangeError",
            AuditError::Kind(_) => "KindError",
            AuditError::Contract(_) => "ContractError",
            AuditError::Singularity(_) => "SingularityError",
            AuditError::Divergence { .. } => "DivergenceError",
            AuditError::Convergence(_) => "ConvergenceError",
            AuditError::Config(_) => "ConfigError",
            AuditError::Version { .. } => "VersionError",
            AuditError::Schema { .. } => "SchemaError",
            AuditError::Io { .. } => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, AuditError>;
