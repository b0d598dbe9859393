use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid note: {0}")]
    InvalidNote(String),

    #[error("song has {0} active part(s); part separation needs at least two")]
    TooFewParts(usize),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("malformed MIDI data at byte {offset}: {msg}")]
    Midi { offset: usize, msg: String },

    #[error("dataset format error at line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("missing hints: {0}")]
    MissingHints(&'static str),

    #[error("closest-pitch state undefined: note {0} arrives before any part onset")]
    NoActivePart(usize),

    #[error("model has not been trained")]
    Untrained,

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
