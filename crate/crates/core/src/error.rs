use thiserror::Error;

/// Errors surfaced by the planning stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A scenario or value violates a model invariant.
    #[error("validation: {0}")]
    Validation(String),
    /// A grid/iteration schedule violates a resolution condition.
    #[error("schedule: {0}")]
    Schedule(String),
    /// An argument is outside an operation's domain.
    #[error("domain: {0}")]
    Domain(String),
    /// A lookup over an empty or mismatched node set.
    #[error("lookup: {0}")]
    Lookup(String),
    /// A configured resource budget was exceeded.
    #[error("budget: {0}")]
    Budget(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn schedule(msg: impl Into<String>) -> Self {
        Error::Schedule(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }
    pub fn budget(msg: impl Into<String>) -> Self {
        Error::Budget(msg.into())
    }
}
