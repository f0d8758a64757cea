//! Training, generation, adaptation and evaluation on top of `sfda-core`.
//!
//! The crate is organized along the pipeline stages: [`store`] and
//! [`dataset`] handle the on-disk sample layout, [`nn`] holds the candle
//! building blocks, [`diffusion`] and [`segmenter`] train the two source
//! models, [`approximate`] runs reliability selection over generated
//! translations, [`adapt`] fine-tunes on the accepted pairs, and
//! [`evalrep`] scores the outcome. [`pipeline`] chains everything behind
//! the `sfda` binary.

pub mod adapt;
pub mod approximate;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod evalrep;
pub mod nn;
pub mod pipeline;
pub mod segmenter;
pub mod store;
pub mod tensor;

/// Errors raised by pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sfda_core::Error),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {what} at {path}: {message}")]
    Malformed {
        what: &'static str,
        path: std::path::PathBuf,
        message: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Stage(String),
}

impl Error {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(message: impl Into<String>) -> Self {
        Error::Stage(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
