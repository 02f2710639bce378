use thiserror::Error;

/// Crate-wide error type. Variants map 1:1 onto the failure modes the public
/// operations document; callers that only care about exit status can use
/// [`Error::is_evaluation_failure`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layout change requires a rank-4 tensor: {0}")]
    UnsupportedRank(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),

    #[error("config has {got} values but template defines {expected} params")]
    LengthMismatch { expected: usize, got: usize },

    #[error("rejection sampling exhausted after {attempts} attempts: {detail}")]
    ExhaustedSampling { attempts: usize, detail: String },

    #[error("schedule space has {size} raw points, above the cap of {cap}")]
    SpaceTooLarge { size: u128, cap: u128 },

    #[error("individual at index {0} has no fitness; evaluate the population first")]
    MissingFitness(usize),

    #[error("runtime must be positive and finite, got {0}")]
    NonPositiveRuntime(f64),

    #[error("kernel failed under measurement: {0}")]
    KernelFailure(String),

    #[error("loss is not finite: {0}")]
    NonFiniteLoss(String),

    #[error("action {action} out of range for action space of size {size}")]
    IndexOutOfRange { action: usize, size: usize },

    #[error("no candidates to select from")]
    NoCandidates,

    #[error("plan references no implementation for node '{0}'")]
    UnboundNode(String),

    #[error("strategy set is empty")]
    EmptyStrategySet,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn malformed(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Error::Malformed { what: what.into(), detail: detail.to_string() }
    }

    /// True for failures of the evaluation machinery itself (as opposed to
    /// bad user input); the CLI maps these to a distinct exit code.
    pub fn is_evaluation_failure(&self) -> bool {
        matches!(
            self,
            Error::KernelFailure(_) | Error::NonPositiveRuntime(_) | Error::NonFiniteLoss(_)
        )
    }
}
