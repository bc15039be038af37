//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

/// Fatal error raised by core operations.
///
/// `Shape` and `Config` indicate a misassembled computation and name the
/// offending extents; `Diverged` reports a NaN loss during training;
/// `Usage` flags a contract violation such as a second backward pass on
/// the same graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    Shape { op: &'static str, detail: String },
    Config { detail: String },
    Diverged { context: &'static str, index: usize },
    Usage { detail: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            CoreError::Config { detail } => write!(f, "configuration error: {detail}"),
            CoreError::Diverged { context, index } => {
                write!(f, "training diverged (NaN loss) in {context} at {index}")
            }
            CoreError::Usage { detail } => write!(f, "usage error: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}
