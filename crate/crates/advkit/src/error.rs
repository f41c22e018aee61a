use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the engine, the oracle, and the experiment pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or layer received data whose shape does not match its contract.
    Shape { context: String, detail: String },
    /// An operation was invoked outside its documented contract.
    Contract { context: String, detail: String },
    /// The oracle's query budget is spent.
    BudgetExhausted { budget: usize },
    /// A sample identity was queried a second time.
    RepeatedQuery { id: u64 },
    /// A dataset file could not be parsed.
    Format { path: String, position: String, detail: String },
    /// A configuration file or override is invalid.
    Config { key: String, detail: String },
    /// Underlying I/O failure.
    Io { path: String, detail: String },
    /// A failure inside one sweep cell, with the cell key attached.
    Cell { key: String, source: Box<Error> },
}

impl Error {
    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { context: context.into(), detail: detail.into() }
    }

    pub fn contract(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Contract { context: context.into(), detail: detail.into() }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { key: key.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, err: &std::io::Error) -> Self {
        Error::Io { path: path.into(), detail: err.to_string() }
    }

    /// Wrap an error with the key of the sweep cell it occurred in.
    pub fn in_cell(self, key: impl Into<String>) -> Self {
        Error::Cell { key: key.into(), source: Box::new(self) }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, detail } => write!(f, "shape mismatch in {context}: {detail}"),
            Error::Contract { context, detail } => {
                write!(f, "contract violation in {context}: {detail}")
            }
            Error::BudgetExhausted { budget } => {
                write!(f, "query budget exhausted ({budget} queries used)")
            }
            Error::RepeatedQuery { id } => {
                write!(f, "sample {id} was already queried; repeated queries are rejected")
            }
            Error::Format { path, position, detail } => {
                write!(f, "malformed data in {path} at {position}: {detail}")
            }
            Error::Config { key, detail } => write!(f, "invalid config key `{key}`: {detail}"),
            Error::Io { path, detail } => write!(f, "i/o error on {path}: {detail}"),
            Error::Cell { key, source } => write!(f, "cell {key}: {source}"),
        }
    }
}

impl std::error::Error for Error {}
