use std::io;
use std::path::PathBuf;

use drawdown_core::model::{DomainError, ModelError};
use drawdown_core::oracle::OracleError;
use drawdown_core::policy::PolicyError;
use drawdown_core::scale::ScaleError;
use drawdown_core::simulate::SimError;
use thiserror::Error;

/// Command failure, carrying the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed input: unreadable JSON, unknown fields, invalid problem.
    #[error("{0}")]
    Parse(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0} verification check(s) failed")]
    Verify(usize),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Io { .. } => 1,
            CliError::Domain(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Verify(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Parse(format!("invalid problem: {e}"))
    }
}

impl From<DomainError> for CliError {
    fn from(e: DomainError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<ScaleError> for CliError {
    fn from(e: ScaleError) -> Self {
        match e {
            ScaleError::Domain(d) => d.into(),
            ScaleError::InfiniteSafeLevel | ScaleError::InvalidArgument(_) => CliError::Domain(e.to_string()),
            ScaleError::NonPositiveExcess { .. } | ScaleError::Numerics(_) | ScaleError::IndeterminateLimit { .. } => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Domain(d) => d.into(),
            PolicyError::Scale(s) => s.into(),
            PolicyError::StencilOutsideDomain { .. } | PolicyError::InvalidStep(_) => CliError::Domain(e.to_string()),
            PolicyError::DegenerateSecondDerivative { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Domain(d) => d.into(),
            SimError::InvalidConfig(_) | SimError::InvalidStrategy(_) => CliError::Parse(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Domain(_) => CliError::Domain(e.to_string()),
            OracleError::Scale(s) => s.into(),
            OracleError::Policy(p) => p.into(),
            OracleError::StepUnderflow { .. } | OracleError::Numerics(_) => CliError::Numerical(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let domain: CliError = DomainError::NonPositiveMax { m: -1.0 }.into();
        assert_eq!(domain.exit_code(), 2);
        let limit: CliError = ScaleError::IndeterminateLimit {
            partial: 1.0,
            truncation_point: 2.0,
        }
        .into();
        assert_eq!(limit.exit_code(), 3);
        let nested: CliError = PolicyError::Scale(ScaleError::InfiniteSafeLevel).into();
        assert_eq!(nested.exit_code(), 2);
        assert_eq!(CliError::from(SimError::InvalidConfig("x")).exit_code(), 1);
        assert_eq!(CliError::Verify(3).exit_code(), 4);
    }
}
