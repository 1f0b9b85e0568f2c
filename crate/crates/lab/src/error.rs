use std::process::ExitCode;

/// Failures split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Bad configuration or usage: exit code 1.
    #[error("configuration error: {0}")]
    Config(String),
    /// Anything that goes wrong while running: exit code 2.
    #[error("runtime failure: {0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl LabError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            LabError::Config(_) => ExitCode::from(1),
            LabError::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl From<disc_core::Error> for LabError {
    fn from(e: disc_core::Error) -> Self {
        match e {
            disc_core::Error::Config(m) => LabError::Config(m),
            other => LabError::Runtime(anyhow::Error::new(other)),
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Runtime(e.into())
    }
}
