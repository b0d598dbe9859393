//! Domain types shared across the crate, plus the downmix operation and the
//! accuracy metric.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_PITCH: u8 = 127;

/// One musical event on the step grid of its song.
///
/// The derived ordering compares `(time, pitch, duration)`, which is the
/// canonical order used for mixtures (ties are then broken by part).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Note {
    pub time: u32,
    pub pitch: u8,
    pub duration: u32,
}

impl Note {
    pub fn new(time: u32, pitch: u8, duration: u32) -> Result<Self> {
        if pitch > MAX_PITCH {
            return Err(Error::InvalidNote(format!("pitch {pitch} out of range")));
        }
        if duration == 0 {
            return Err(Error::InvalidNote(format!(
                "zero duration at time {time}, pitch {pitch}"
            )));
        }
        Ok(Self {
            time,
            pitch,
            duration,
        })
    }

    pub fn end(&self) -> u32 {
        self.time + self.duration
    }

    /// True while the note sounds at `time`, over `[time, time + duration)`.
    pub fn is_active_at(&self, time: u32) -> bool {
        self.time <= time && time < self.end()
    }
}

impl fmt::Display for Note {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, p={}, d={})", self.time, self.pitch, self.duration)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    pub part_id: usize,
    pub name: String,
    /// General MIDI program the notes were played with, if known.
    pub program: Option<u8>,
    pub notes: Vec<Note>,
}

impl Track {
    /// Builds a track, sorting its notes into canonical order.
    pub fn new(part_id: usize, name: impl Into<String>, mut notes: Vec<Note>) -> Self {
        notes.sort_unstable();
        Self {
            part_id,
            name: name.into(),
            program: None,
            notes,
        }
    }

    pub fn with_program(mut self, program: u8) -> Self {
        self.program = Some(program);
        self
    }
}

/// Tempo change in microseconds per quarter note, effective from `tick`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoChange {
    pub tick: u32,
    pub micros_per_quarter: u32,
}

pub const DEFAULT_MICROS_PER_QUARTER: u32 = 500_000;

/// A multitrack piece.
///
/// `resolution` is the number of time units per quarter note: raw MIDI ticks
/// right after parsing, grid steps after quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Song {
    pub source_id: String,
    pub resolution: u32,
    pub tracks: Vec<Track>,
    /// Size of the label space. Usually the track count, but fixed-ensemble
    /// corpora (pop) keep the ensemble size even when a family is absent.
    pub num_parts: usize,
    pub tempo_map: Vec<TempoChange>,
}

impl Song {
    pub fn new(source_id: impl Into<String>, resolution: u32, tracks: Vec<Track>) -> Self {
        let num_parts = tracks.iter().map(|t| t.part_id + 1).max().unwrap_or(0);
        Self {
            source_id: source_id.into(),
            resolution,
            tracks,
            num_parts,
            tempo_map: Vec::new(),
        }
    }

    /// Number of tracks that carry at least one note.
    pub fn active_parts(&self) -> usize {
        self.tracks.iter().filter(|t| !t.notes.is_empty()).count()
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_parts];
        for track in &self.tracks {
            if track.part_id >= self.num_parts {
                return Err(Error::InvalidNote(format!(
                    "track part id {} outside 0..{}",
                    track.part_id, self.num_parts
                )));
            }
            if std::mem::replace(&mut seen[track.part_id], true) {
                return Err(Error::InvalidNote(format!(
                    "duplicate part id {} in {}",
                    track.part_id, self.source_id
                )));
            }
            if !track.notes.windows(2).all(|w| w[0] <= w[1]) {
                return Err(Error::InvalidNote(format!(
                    "track {} is not sorted",
                    track.name
                )));
            }
        }
        Ok(())
    }
}

/// A label-stripped, globally ordered note sequence with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub notes: Vec<Note>,
    pub labels: Vec<usize>,
    pub num_parts: usize,
}

impl Mixture {
    pub fn new(notes: Vec<Note>, labels: Vec<usize>, num_parts: usize) -> Result<Self> {
        if notes.len() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "mixture notes and labels",
                left: notes.len(),
                right: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_parts) {
            return Err(Error::InvalidNote(format!(
                "label {bad} outside 0..{num_parts}"
            )));
        }
        let mixture = Self {
            notes,
            labels,
            num_parts,
        };
        if !mixture.is_canonical() {
            return Err(Error::InvalidNote("mixture is not in canonical order".into()));
        }
        Ok(mixture)
    }

    /// A mixture whose labels are unknown (all zero), e.g. live keyboard input.
    pub fn unlabeled(mut notes: Vec<Note>, num_parts: usize) -> Self {
        notes.sort_unstable();
        let labels = vec![0; notes.len()];
        Self {
            notes,
            labels,
            num_parts,
        }
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        self.notes
            .iter()
            .zip(&self.labels)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| (w[0].0, w[0].1) <= (w[1].0, w[1].1))
    }

    /// The first `len` notes, which is itself a valid mixture.
    pub fn prefix(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            notes: self.notes[..len].to_vec(),
            labels: self.labels[..len].to_vec(),
            num_parts: self.num_parts,
        }
    }

    /// Contiguous window `[start, start + len)`, clamped to the mixture.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let start = start.min(self.len());
        let end = (start + len).min(self.len());
        Self {
            notes: self.notes[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            num_parts: self.num_parts,
        }
    }

    /// Re-assembles a multitrack song from the mixture and the given labels.
    pub fn separate(&self, labels: &[usize], names: &[String]) -> Result<Song> {
        if labels.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "labels and mixture",
                left: labels.len(),
                right: self.len(),
            });
        }
        let mut parts: Vec<Vec<Note>> = vec![Vec::new(); self.num_parts];
        for (note, &label) in self.notes.iter().zip(labels) {
            parts
                .get_mut(label)
                .ok_or_else(|| Error::InvalidNote(format!("label {label} outside ensemble")))?
                .push(*note);
        }
        let tracks = parts
            .into_iter()
            .enumerate()
            .map(|(k, notes)| {
                let name = names.get(k).cloned().unwrap_or_else(|| format!("part {}", k + 1));
                Track::new(k, name, notes)
            })
            .collect();
        let mut song = Song::new("separated", 0, tracks);
        song.num_parts = self.num_parts;
        Ok(song)
    }
}

/// Per-note labels with optional class scores (`N x K`).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub scores: Option<Array2<f32>>,
}

impl Prediction {
    pub fn from_labels(labels: Vec<usize>) -> Self {
        Self {
            labels,
            scores: None,
        }
    }

    /// Labels each row by its highest score, ties going to the lower part.
    pub fn from_scores(scores: Array2<f32>) -> Self {
        let labels = scores.rows().into_iter().map(|row| argmax(row.iter().copied())).collect();
        Self {
            labels,
            scores: Some(scores),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row-wise softmax of the scores.
    pub fn probabilities(&self) -> Option<Array2<f32>> {
        let mut p = self.scores.clone()?;
        for mut row in p.rows_mut() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        Some(p)
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Merges all tracks of `song` into one canonically ordered mixture, keeping
/// the originating part of every note as its label.
pub fn downmix(song: &Song) -> Result<Mixture> {
    let active = song.active_parts();
    if active < 2 {
        return Err(Error::TooFewParts(active));
    }
    let mut tagged: Vec<(Note, usize)> = song
        .tracks
        .iter()
        .flat_map(|t| t.notes.iter().map(move |&n| (n, t.part_id)))
        .collect();
    tagged.sort_unstable();
    let (notes, labels) = tagged.into_iter().unzip();
    Ok(Mixture {
        notes,
        labels,
        num_parts: song.num_parts,
    })
}

/// Fraction of positions where the predicted label equals the truth.
pub fn accuracy(pred: &Prediction, truth: &Mixture) -> Result<f64> {
    label_accuracy(&pred.labels, &truth.labels)
}

pub fn label_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "prediction and truth",
            left: pred.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Correct-count accumulator for note-level (micro) accuracy over many songs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn add(&mut self, pred: &[usize], truth: &[usize]) {
        self.correct += pred.iter().zip(truth).filter(|(a, b)| a == b).count();
        self.total += truth.len();
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl std::ops::AddAssign for Tally {
    fn add_assign(&mut self, rhs: Self) {
        self.correct += rhs.correct;
        self.total += rhs.total;
    }
}
