use alloc::string::String;

/// Errors raised by the compute core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, bounds).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Rejection sampling found no window meeting the hole-fraction bounds.
    #[error("no patch with an admissible hole fraction after {tries} tries")]
    SamplingExhausted { tries: usize },
    #[error("coarse backend: {0}")]
    Backend(String),
    #[error("ranking: {0}")]
    Ranking(String),
    #[error("non-finite loss ({0})")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::contract!($($arg)*));
        }
    };
}
pub(crate) use ensure;
