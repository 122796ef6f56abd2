use repsim_toy::ToyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit 2.
    #[error("{0}")]
    Usage(String),
    /// Missing, corrupt or inconsistent input data; exit 3.
    #[error("{0}")]
    Data(String),
}

fn core_code(e: &repsim_core::Error) -> u8 {
    if e.is_argument() {
        2
    } else {
        3
    }
}

/// Exit status for an error: the first classifiable cause in the chain
/// decides, anything unclassified is a data problem.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => 2,
                CliError::Data(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<repsim_core::Error>() {
            return core_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ToyError>() {
            return match e {
                ToyError::Config(_) => 2,
                ToyError::Analysis(inner) => core_code(inner),
                ToyError::Divergence { .. } => 3,
            };
        }
    }
    3
}
