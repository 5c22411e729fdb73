// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use crate::hook::ProjSite;

/// Errors produced by kernels, the hook engine, ops, the router and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 3],
        rhs: [usize; 3],
    },

    #[error("{op}: {msg}")]
    InvalidInput { op: &'static str, msg: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("op `{op}` changed tensor shape at {site}: {before:?} -> {after:?}")]
    ShapeChanged {
        op: String,
        site: ProjSite,
        before: [usize; 3],
        after: [usize; 3],
    },

    #[error("hub: {0}")]
    Hub(String),

    #[error("masactrl: duplicate record for {site} at step {step}")]
    DuplicateRecord { site: ProjSite, step: usize },

    #[error("masactrl: no cached entry for {site} at step {step}")]
    MissingCache { site: ProjSite, step: usize },

    #[error("parse error at `{token}`: {msg}")]
    Parse { token: String, msg: String },

    #[error("router: {0}")]
    Router(String),

    #[error("harness: {0}")]
    Harness(String),

    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Reads a whole file, naming the path on failure.
pub fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

impl Error {
    pub(crate) fn parse(token: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            token: token.into(),
            msg: msg.into(),
        }
    }
}
