use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pretraining / incremental-evaluation pipeline.
#[derive(Debug, Error)]
pub enum SvtError {
    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("capacity error: requested {requested} classes but the word list holds {available}")]
    Capacity { requested: usize, available: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("index error: {index} out of range 0..{len}")]
    Index { index: usize, len: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: non-finite values in {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("vocab error: token id {id} outside vocabulary of size {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },

    #[error("label error: label {label} outside {classes} classifier rows")]
    Label { label: usize, classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: epoch {epoch} beyond schedule of {total} epochs")]
    Schedule { epoch: usize, total: usize },

    #[error("divergence: total loss became non-finite at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("conflict error: class {0} already has a prototype")]
    Conflict(usize),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("frozen-backbone violation: checksum {before} changed to {after}")]
    FrozenBackbone { before: String, after: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("filter error: unknown class {0:?}")]
    Filter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SvtError>,
    },
}

pub type Result<T> = std::result::Result<T, SvtError>;

impl SvtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SvtError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        SvtError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
