use std::path::PathBuf;

use motionedit_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {msg}")]
    Input { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] CoreError),

    /// A self-test or check reported failure.
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn input(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        CliError::Input {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// 0 success, 1 check or runtime failure, 2 usage or input error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input { .. } => 2,
            CliError::Check(_) => 1,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Frame { source, .. } => core_exit_code(source),
        CoreError::Io { .. }
        | CoreError::Json { .. }
        | CoreError::Format(_)
        | CoreError::Config(_)
        | CoreError::Keypoints(_)
        | CoreError::Mask(_)
        | CoreError::EmptyForeground
        | CoreError::Schedule(_)
        | CoreError::MissingParam(_)
        | CoreError::ShapeMismatch { .. }
        | CoreError::Shape { .. } => 2,
        _ => 1,
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
