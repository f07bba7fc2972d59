use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dpseq_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("regenerated {0} differs from the recorded artifact")]
    Mismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> Error {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// Process exit code: 2 configuration, 3 privacy budget, 4 numerical
    /// divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use dpseq_core::Error as E;
        match self {
            Error::Config(_) => 2,
            Error::Core(e) => match e {
                E::BudgetExceeded { .. } | E::BudgetExhaustedBeforeOneEpoch { .. } => 3,
                E::DivergenceDetected { .. } => 4,
                E::InvalidConfig(_)
                | E::InvalidRange(_)
                | E::InvalidBudget(_)
                | E::InvalidDelta(_)
                | E::InvalidScale(_)
                | E::InvalidWeights
                | E::InvalidOrder(_)
                | E::TooFewSpeakers { .. }
                | E::EmptySubset(_)
                | E::InfeasibleTarget { .. }
                | E::NoConvergence(_) => 2,
                _ => 1,
            },
            _ => 1,
        }
    }
}
