//! Part separation for symbolic multitrack music.
//!
//! Given a single-track mixture of notes, assign every note to a part
//! (voice, instrument or track), either online (causally, note by note) or
//! offline (seeing the whole sequence).

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod harness;
pub mod ingest;
pub mod neural;
pub mod types;

pub use error::{Error, Result};
pub use types::{accuracy, downmix, label_accuracy, Mixture, Note, Prediction, Song, Tally, Track};
