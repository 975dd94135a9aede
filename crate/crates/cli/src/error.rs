use collapse_lab::LabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(#[from] LabError),
    #[error("report error: {0}")]
    Report(String),
}

impl CliError {
    /// Process exit code: 1 for bad configuration or unreadable reports, 2
    /// for failures while a run is executing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Report(_) => 1,
            CliError::Run(_) => 2,
        }
    }
}
