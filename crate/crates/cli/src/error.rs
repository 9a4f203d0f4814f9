use agentinfer_sim::config::ConfigIssue;
use agentinfer_sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {}", render(.0))]
    Config(Vec<ConfigIssue>),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{0}")]
    Io(String),
}

fn render(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config(vec![ConfigIssue {
            path: path.into(),
            message: message.into(),
        }])
    }

    pub fn io(context: impl std::fmt::Display, err: std::io::Error) -> Self {
        CliError::Io(format!("{context}: {err}"))
    }

    /// 2 for config errors, 3 for contract violations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Contract(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(issues) => CliError::Config(issues),
            SimError::Contract(m) => CliError::Contract(m),
        }
    }
}
