use alloc::string::String;

/// Errors produced by the guidance-learning routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("preference group needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },
    #[error("end-of-sequence token at interior position {0}")]
    InteriorEos(usize),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("enumeration needs {needed} states but the budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },
    #[error("infinite KL divergence: prior has zero mass on token {0}")]
    InfiniteKl(usize),
    #[error("preference source failed: {0}")]
    Source(String),
    #[error("training observer failed: {0}")]
    Observer(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::Error::Parameter(alloc::format!($($arg)*))
    };
}

pub(crate) use {param_err, shape_err};
