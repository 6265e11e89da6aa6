use flowreg::error::Category;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] flowreg::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{failed} of {total} gradient cases exceed the tolerance")]
    GradcheckFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.tag(),
            CliError::Usage(_) => "usage",
            CliError::GradcheckFailed { .. } => "gradcheck",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.category() {
                Category::Usage => 2,
                Category::Data => 3,
                Category::Numerical => 4,
            },
            CliError::Usage(_) => 2,
            CliError::GradcheckFailed { .. } => 4,
        }
    }
}

pub fn usage(detail: impl Into<String>) -> CliError {
    CliError::Usage(detail.into())
}
