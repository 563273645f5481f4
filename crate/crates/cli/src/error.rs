use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_QUALITY: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] diffss_core::Error),
    #[error("quality gate: {0}")]
    QualityGate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Core(e) if e.is_backend() => EXIT_BACKEND,
            Self::Core(_) => EXIT_CONFIG,
            Self::QualityGate(_) => EXIT_QUALITY,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
