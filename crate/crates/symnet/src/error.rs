//! Crate-wide error type. Shape violations inside tensor kernels are
//! programmer errors and panic with messages naming the offending shapes;
//! everything reachable from user input (configs, checkpoints, corpora,
//! training runs) surfaces as a variant here.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("sharing verification failed:\n{0}")]
    Verify(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
