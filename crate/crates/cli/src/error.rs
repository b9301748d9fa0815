use std::fmt;

/// Everything that ends a run, grouped by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file or parameter values. Exit 2.
    Config(String),
    /// A computation failed or a checked invariant did not hold. Exit 3.
    Numerical(String),
    /// Filesystem or serialization trouble. Exit 1.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn key(key: &str, msg: impl fmt::Display) -> Self {
        Self::Config(format!("`{key}`: {msg}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<rotout::Error> for CliError {
    fn from(e: rotout::Error) -> Self {
        use rotout::Error as E;
        match e {
            E::Singular { .. } | E::DegenerateCovariance { .. } | E::StaleCache { .. } | E::StatsNotPopulated => {
                Self::Numerical(e.to_string())
            }
            E::InvalidParameter { name: "loss", .. } => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Fails with a config error naming `key` unless `ok`.
pub fn require(ok: bool, key: &str, msg: &str) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::key(key, msg))
    }
}
