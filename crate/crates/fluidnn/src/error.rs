use thiserror::Error;

use fluidnn_runtime::RuntimeError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario line {line}: {message}")]
    Scenario { line: usize, message: String },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("report parse error at line {line}: {message}")]
    Report { line: usize, message: String },
    #[error(transparent)]
    Core(#[from] fluidnn_core::Error),
    #[error(transparent)]
    Runtime(RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<RuntimeError> for HarnessError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Config { line, message } => Self::Config { line, message },
            RuntimeError::Core(c) => Self::Core(c),
            RuntimeError::Io(io) => Self::Io(io),
            other => Self::Runtime(other),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Process exit codes, one per error class.
pub mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const SCENARIO: u8 = 4;
    pub const IO: u8 = 5;
    pub const DATA: u8 = 6;
    pub const MODEL_MISMATCH: u8 = 7;
    pub const NETWORK: u8 = 8;
    pub const DOMAIN: u8 = 9;
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        use fluidnn_core::Error as C;
        match self {
            Self::Usage(_) => exit::USAGE,
            Self::Config { .. } => exit::CONFIG,
            Self::Scenario { .. } => exit::SCENARIO,
            Self::Io(_) => exit::IO,
            Self::Report { .. } => exit::DATA,
            Self::Domain(_) => exit::DOMAIN,
            Self::Core(C::Io(_)) => exit::IO,
            Self::Core(_) => exit::DATA,
            Self::Runtime(e) => match e {
                RuntimeError::ModelMismatch { .. } => exit::MODEL_MISMATCH,
                RuntimeError::Invalid(_) => exit::CONFIG,
                RuntimeError::Bind { .. }
                | RuntimeError::Connect { .. }
                | RuntimeError::Timeout(_)
                | RuntimeError::Closed(_)
                | RuntimeError::Protocol(_)
                | RuntimeError::Remote { .. } => exit::NETWORK,
                RuntimeError::Config { .. } => exit::CONFIG,
                RuntimeError::Core(_) => exit::DATA,
                RuntimeError::Io(_) => exit::IO,
            },
        }
    }
}
