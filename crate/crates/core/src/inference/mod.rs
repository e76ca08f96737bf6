//! Posterior exploration over the hyperparameters.

mod ess;
mod mcmc;
mod optimize;

pub use ess::{ess, EssEstimate};
pub use mcmc::{
    adaptive_rwmh, read_checkpoint, resume_rwmh, AdaptConfig, Chain, Checkpointing, RwmhKernel, SamplerSettings,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optimize::{maximize, numerical_hessian, ModeOptions, ModeResult};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("target is not finite at the initial point ({0})")]
    InvalidInit(f64),
    #[error("chain of length {got} is too short (need {need})")]
    ChainTooShort { got: usize, need: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}
