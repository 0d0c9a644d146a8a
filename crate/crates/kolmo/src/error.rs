use std::fmt;

/// Errors shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// An argument outside an operation's domain (non-positive time, x <= 0, ...).
    Domain(String),
    /// A quadrature did not reach its tolerance within the subdivision budget.
    NonConvergence {
        what: String,
        value: f64,
        error_estimate: f64,
        failed_axis: Option<usize>,
    },
    /// A rejection sampler ran out of attempts.
    BudgetExhausted {
        attempts: u64,
        accepted: u64,
        acceptance_rate: f64,
    },
    /// A dynamic-programming table would exceed its configured state budget.
    DpOverflow { states: usize, budget: usize },
    /// A requested endpoint carries zero probability mass.
    Unreachable(String),
    /// A lookup table is missing a required entry.
    MissingValue(String),
    /// Malformed configuration or input file.
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::NonConvergence {
                what,
                value,
                error_estimate,
                failed_axis,
            } => {
                write!(
                    f,
                    "quadrature failed to converge: {what} (value {value:.6e}, error estimate {error_estimate:.6e}"
                )?;
                if let Some(axis) = failed_axis {
                    write!(f, ", axis {axis}")?;
                }
                write!(f, ")")
            }
            Error::BudgetExhausted {
                attempts,
                accepted,
                acceptance_rate,
            } => write!(
                f,
                "sampling budget exhausted: {accepted} accepted out of {attempts} attempts (rate {acceptance_rate:.3e})"
            ),
            Error::DpOverflow { states, budget } => {
                write!(f, "dp state space {states} exceeds budget {budget}")
            }
            Error::Unreachable(msg) => write!(f, "unreachable endpoint: {msg}"),
            Error::MissingValue(msg) => write!(f, "missing value: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
