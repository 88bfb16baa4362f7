use std::fmt;

/// Process exit status for every command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    CheckFailed = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(exit: ExitCode, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Data, message)
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self::new(ExitCode::CheckFailed, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<cmfusion::Error> for CliError {
    fn from(e: cmfusion::Error) -> Self {
        use cmfusion::Error as E;
        let exit = match &e {
            E::Config(_) => ExitCode::Config,
            E::Parse { .. } | E::Schema(_) | E::Data(_) | E::Io { .. } | E::Shape { .. } | E::InvalidShape(_) => {
                ExitCode::Data
            }
            E::Numerical(_) | E::Diverged { .. } | E::Checkpoint(_) | E::Contract(_) => ExitCode::Numerical,
        };
        Self::new(exit, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
