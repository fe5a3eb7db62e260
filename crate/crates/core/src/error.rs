use alloc::string::String;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("intensity {value} at flat index {index} is outside [0, 1]")]
    Range { index: usize, value: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("budget of {requested} symbols is infeasible: side information alone needs {minimum}")]
    InfeasibleBudget { requested: usize, minimum: usize },
    #[error("budget of {requested} symbols exceeds the {available} symbols available at full rate")]
    BudgetTooLarge { requested: usize, available: usize },
    #[error("framing error: {0}")]
    Framing(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("frame of {height}x{width} is too small for MS-SSIM (needs at least 11x11)")]
    FrameTooSmall { height: usize, width: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
