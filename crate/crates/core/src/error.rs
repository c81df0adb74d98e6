use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("svd did not converge for {layer} after {sweeps} sweeps (off-diagonal {residual:e})")]
    SvdNoConvergence {
        layer: String,
        sweeps: usize,
        residual: f64,
    },

    #[error("training diverged at step {step} (last finite loss {last_finite_loss})")]
    Diverged { step: usize, last_finite_loss: f64 },

    #[error("dataset {path}:{line}: {msg}")]
    Dataset {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
