//! Greedy online assignment of each note to the part whose last pitch is
//! nearest.

use crate::error::{Error, Result};
use crate::types::{Mixture, Prediction};

/// Penalty added to parts that are still sounding when monophony is enforced.
pub const MONO_PENALTY: f64 = 1e9;

/// Ground-truth labels revealed at each part's first note.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Onsets {
    /// `first[k]` is the index of part `k`'s first note, if it plays.
    pub first: Vec<Option<usize>>,
}

impl Onsets {
    pub fn from_mixture(mixture: &Mixture) -> Self {
        let mut first = vec![None; mixture.num_parts];
        for (i, &label) in mixture.labels.iter().enumerate() {
            if label < first.len() && first[label].is_none() {
                first[label] = Some(i);
            }
        }
        Self { first }
    }

    pub fn part_starting_at(&self, index: usize) -> Option<usize> {
        self.first.iter().position(|&f| f == Some(index))
    }
}

/// Running state of the greedy assignment; usable one note at a time.
#[derive(Clone, Debug)]
pub struct ClosestPitch {
    last_pitch: Vec<Option<u8>>,
    release: Vec<u32>,
    mono: bool,
    seen: usize,
}

impl ClosestPitch {
    pub fn new(num_parts: usize, mono: bool) -> Self {
        Self {
            last_pitch: vec![None; num_parts],
            release: vec![0; num_parts],
            mono,
            seen: 0,
        }
    }

    /// Labels the next note. `onset` carries the true part when this note is
    /// that part's first.
    pub fn step(&mut self, time: u32, pitch: u8, duration: u32, onset: Option<usize>) -> Result<usize> {
        let index = self.seen;
        let part = match onset {
            Some(k) => k,
            None => {
                let mut best: Option<(f64, usize)> = None;
                for (k, last) in self.last_pitch.iter().enumerate() {
                    let Some(last) = *last else { continue };
                    let d = f64::from(pitch) - f64::from(last);
                    let mut cost = d * d;
                    if self.mono && self.release[k] > time {
                        cost += MONO_PENALTY;
                    }
                    if best.is_none_or(|(c, _)| cost < c) {
                        best = Some((cost, k));
                    }
                }
                best.ok_or(Error::NoActivePart(index))?.1
            }
        };
        self.last_pitch[part] = Some(pitch);
        self.release[part] = self.release[part].max(time + duration);
        self.seen += 1;
        Ok(part)
    }
}

/// Runs the greedy assignment over a whole mixture.
pub fn closest_pitch(mixture: &Mixture, onsets: &Onsets, mono: bool) -> Result<Prediction> {
    let mut state = ClosestPitch::new(mixture.num_parts, mono);
    let labels = mixture
        .notes
        .iter()
        .enumerate()
        .map(|(i, n)| state.step(n.time, n.pitch, n.duration, onsets.part_starting_at(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prediction::from_labels(labels))
}
