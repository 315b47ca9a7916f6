//! Dual-loss binding energy models: a supervised MSE branch anchored to
//! affinity labels plus a denoising score matching branch that shapes the
//! energy landscape, over an SE(3)-invariant frame-averaging energy network.
//! Includes a synthetic Morse-potential benchmark with an analytic oracle.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod energy;
pub mod losses;
pub mod metrics;
pub mod synth;
pub mod trainer;

pub use autodiff::{concat, finite_difference_check, gradient, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error("{0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
