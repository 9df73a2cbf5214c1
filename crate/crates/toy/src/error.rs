use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error(transparent)]
    Core(#[from] tryon_core::Error),

    /// Training produced a non-finite loss; the fields are the diagnostic dump.
    #[error("non-finite loss at step {step}: dsm {dsm}, agn {agn}, sigmas {sigmas:?}, max |param| {max_param}")]
    NonFinite {
        step: usize,
        dsm: f64,
        agn: f64,
        sigmas: Vec<f64>,
        max_param: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ToyError>;
