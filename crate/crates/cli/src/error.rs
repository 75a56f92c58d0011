use pat_core::data::DataError;
use pat_core::inn::InnError;
use pat_core::unroll::UnrollError;
use pat_core::wave::WaveError;
use thiserror::Error;

/// Failure classes, each with a fixed process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// A diagnostic check failed (exit 1).
    #[error("check failed: {0}")]
    Check(String),
    /// Bad flags, config or mismatched inputs (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// Reading or writing artifacts failed (exit 3).
    #[error("I/O error: {0}")]
    Io(String),
    /// NaN or infinity during computation (exit 4).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<WaveError> for CliError {
    fn from(e: WaveError) -> Self {
        match e {
            WaveError::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<InnError> for CliError {
    fn from(e: InnError) -> Self {
        match e {
            InnError::NonFinite => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Wave(w) => w.into(),
            DataError::NonFinite(_) => CliError::Numerical(e.to_string()),
            DataError::Shape(_) | DataError::Phantom(_) | DataError::OutOfBounds { .. } => CliError::Config(e.to_string()),
            DataError::Io { .. } | DataError::Json { .. } | DataError::Checksum { .. } | DataError::Format { .. } => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<UnrollError> for CliError {
    fn from(e: UnrollError) -> Self {
        match e {
            UnrollError::Wave(w) => w.into(),
            UnrollError::Inn(i) => i.into(),
            UnrollError::Data(d) => d.into(),
            UnrollError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            UnrollError::Plan(_) | UnrollError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}
