use thiserror::Error;

use crate::process::ProcessKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("process time {tau} outside the admissible range [{min}, {max}]")]
    TimeOutOfRange { tau: f64, min: f64, max: f64 },

    #[error("the {0} process requires the degraded observation y")]
    MissingObservation(ProcessKind),

    #[error("the {0} process does not take a degraded observation y")]
    UnexpectedObservation(ProcessKind),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel mean coefficient {0:e} is numerically singular")]
    SingularKernel(f64),

    #[error("non-finite state at step {step} (tau = {tau})")]
    NonFinite { step: usize, tau: f64 },

    #[error("training diverged at step {step}: smoothed loss {loss} exceeds 10x the initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("all mixture responsibilities underflowed")]
    Underflow,

    #[error("operator `{0}` is not linear")]
    NonlinearOperator(&'static str),

    #[error("operation `{op}` is not supported for operator `{kind}`")]
    Unsupported { op: &'static str, kind: &'static str },

    #[error("singular linear system")]
    Singular,

    #[error("window length {window} with hop {hop} does not satisfy the overlap-add constraint")]
    NotCola { window: usize, hop: usize },

    #[error("empty signal")]
    EmptySignal,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}
