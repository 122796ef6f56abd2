use thiserror::Error;

pub type Result<T> = std::result::Result<T, ToyError>;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Analysis(#[from] repsim_core::Error),
}
