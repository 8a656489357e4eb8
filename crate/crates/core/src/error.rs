use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation, tracking and experiment code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("search grid needs at least 2 points per axis, got {res_az}x{res_el}")]
    InvalidGridResolution { res_az: usize, res_el: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("RIS configuration entry {index} is not unit modulus (|x| = {modulus})")]
    NotUnitModulus { index: usize, modulus: f64 },

    #[error("cascaded steering response is constant across pilots at this angle")]
    DegenerateDirection,

    #[error("every angle in the search grid is degenerate for this configuration matrix")]
    AllDegenerate,

    #[error("maximum-likelihood estimation needs at least 2 pilots, got {0}")]
    TooFewPilots(usize),

    #[error("pilot length {pilots} outside the admissible range 2..={elements}")]
    InvalidPilotCount { pilots: usize, elements: usize },

    #[error("configuration codebook has no unused entries left")]
    CodebookExhausted,

    #[error("position is not in front of the RIS")]
    BehindSurface,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
