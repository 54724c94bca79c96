// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Everything that can go wrong while loading models, building datasets,
/// or running experiments.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("weight container: {0}")]
    Container(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("context overflow: {needed} tokens exceed the {max}-token window")]
    ContextOverflow { needed: usize, max: usize },

    #[error("nothing to condition on: the conversation and the prompt are both empty")]
    EmptyPrompt,

    #[error("head ({layer}, {head}) lies outside a {n_layers}x{n_heads} model")]
    HeadOutOfRange {
        layer: usize,
        head: usize,
        n_layers: usize,
        n_heads: usize,
    },

    #[error("corpus exhausted: needed {needed} filler tokens, corpus holds {available}")]
    CorpusExhausted { needed: usize, available: usize },

    #[error("needle `{id}` ({needle_tokens} tokens) does not fit a {target_length}-token context")]
    NeedleTooLong {
        id: String,
        needle_tokens: usize,
        target_length: usize,
    },

    #[error("invalid needle `{id}`: {reason}")]
    InvalidNeedle { id: String, reason: String },

    #[error("invalid depth {0}: must lie in [0, 1]")]
    InvalidDepth(f64),

    #[error("trace does not match sample: {0}")]
    TraceMismatch(String),

    #[error("answer token `{0}` does not encode to a single token")]
    UnknownAnswerToken(String),

    #[error("wrong answer for `{id}` reaches recall {recall:.3} against the needle answer")]
    WrongAnswerIsCorrect { id: String, recall: f64 },

    #[error("head sets come from different model shapes ({left} vs {right})")]
    ConfigMismatch { left: String, right: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("cannot aggregate an empty record set")]
    EmptyRecords,

    #[error("experiment: {0}")]
    Experiment(String),

    #[error("sample `{sample}`: {source}")]
    Sample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the id of the sample being processed.
    pub fn in_sample(self, sample: impl Into<String>) -> Self {
        Self::Sample {
            sample: sample.into(),
            source: Box::new(self),
        }
    }
}
