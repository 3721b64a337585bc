use std::path::PathBuf;

use crate::optimize::OptimizeTrace;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("degenerate parallax: {0}")]
    DegenerateParallax(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("gradient probe produced a non-finite loss along coordinate {coordinate}")]
    Probe { coordinate: usize },

    #[error("optimization diverged after {} iterations: {reason}", trace.iterations)]
    Optimization {
        reason: String,
        trace: Box<OptimizeTrace>,
    },

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape { expected, actual });
    }
    Ok(())
}
