use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("integrity error for {path}: expected sha256 {expected}, got {actual}")]
    Integrity {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("fetch error for {url}: {reason}")]
    Fetch { url: String, reason: String },

    #[error("sampler diverged at step {step}: |position| = {norm:e}")]
    Divergence { step: u64, norm: f64, dump: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported file version {found} (this build reads version {supported})")]
    Migration { found: u8, supported: u8 },

    #[error("training failure: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
