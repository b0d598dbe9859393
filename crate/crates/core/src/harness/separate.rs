//! Whole-file separation: MIDI in, one track per predicted part out.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use super::separator::Separator;
use crate::error::{Error, Result};
use crate::features::Hints;
use crate::ingest::{load_song, parse_smf, quantize, write_smf, CorpusConfig, FamilyMap, ParseOptions};
use crate::types::{downmix, Mixture, Note, Prediction, Song};

/// Categorical palette; part `k` always gets color `k`.
pub const PART_COLORS: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Clone, Debug)]
pub struct Separation {
    /// The quantized input notes, with the input's own labels when it had
    /// a usable multitrack layout.
    pub input: Mixture,
    pub has_truth: bool,
    pub prediction: Prediction,
    pub song: Song,
    pub midi: Vec<u8>,
}

impl Separation {
    /// Accuracy against the input's own tracks, when it had any.
    pub fn accuracy(&self) -> Option<f64> {
        self.has_truth.then(|| {
            let hits = self.prediction.labels.iter().zip(&self.input.labels).filter(|(a, b)| a == b).count();
            hits as f64 / self.input.len().max(1) as f64
        })
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("notes\t{}\n", self.input.len()));
        for t in &self.song.tracks {
            out.push_str(&format!("track\t{}\t{}\n", t.name, t.notes.len()));
        }
        if let Some(acc) = self.accuracy() {
            out.push_str(&format!("accuracy\t{acc:.4}\n"));
        }
        out
    }
}

/// Reads a MIDI file as a `k`-part mixture. Multitrack files whose layout
/// matches the profile keep their track labels as ground truth; anything
/// else becomes an unlabeled mixture of all its notes.
pub fn read_mixture(bytes: &[u8], config: &CorpusConfig, k: usize) -> Result<(Mixture, bool)> {
    if let Ok(Some(song)) = load_song(bytes, "input", config, &FamilyMap::default()) {
        if song.num_parts == k && song.tracks.iter().all(|t| t.part_id < k) {
            return Ok((downmix(&song)?, true));
        }
    }
    let raw = parse_smf(bytes, "input", ParseOptions::default())?;
    let song = quantize(&raw, config.resolution, config.profile.time_base());
    let notes: Vec<Note> = song.tracks.iter().flat_map(|t| t.notes.iter().copied()).collect();
    if notes.is_empty() {
        return Err(Error::InvalidNote("input contains no notes".into()));
    }
    Ok((Mixture::unlabeled(notes, k), false))
}

/// Labels every note of a MIDI file and re-assembles it as one track per
/// part. Hints default to those of the input's own tracks when the method
/// needs them.
pub fn separate(
    bytes: &[u8],
    separator: &Separator,
    part_names: &[String],
    hints: Option<Hints>,
    config: &CorpusConfig,
) -> Result<Separation> {
    let k = separator.num_parts();
    let (input, has_truth) = read_mixture(bytes, config, k)?;
    if separator.needs_truth() && !has_truth {
        return Err(Error::MissingHints("labeled multitrack input for an oracle method"));
    }
    let hints = match hints {
        Some(h) => h,
        None if has_truth => Hints::from_mixture(&input),
        None if separator.needs_entry_hints() || separator.needs_pitch_hints() => {
            return Err(Error::MissingHints("hints for an unlabeled input"));
        }
        None => Hints::none(),
    };
    let prediction = separator.predict(&input, &hints)?;
    let mut song = input.separate(&prediction.labels, part_names)?;
    song.source_id = "separated".into();
    song.resolution = config.resolution;
    let midi = write_smf(&song)?;
    Ok(Separation {
        input,
        has_truth,
        prediction,
        song,
        midi,
    })
}

/// Piano roll with one color per part, as PNG bytes.
pub fn piano_roll_png(mixture: &Mixture, labels: &[usize]) -> Result<Vec<u8>> {
    if labels.len() != mixture.len() {
        return Err(Error::LengthMismatch {
            what: "labels and mixture",
            left: labels.len(),
            right: mixture.len(),
        });
    }
    const ROW: u32 = 4;
    const MAX_WIDTH: u32 = 4096;
    let end = mixture.notes.iter().map(Note::end).max().unwrap_or(1).max(1);
    let lo = mixture.notes.iter().map(|n| n.pitch).min().unwrap_or(60).saturating_sub(2);
    let hi = mixture.notes.iter().map(|n| n.pitch).max().unwrap_or(60).saturating_add(2).min(127);
    let scale = f64::from(MAX_WIDTH.min(end * 4)) / f64::from(end);
    let width = ((f64::from(end) * scale).ceil() as u32).max(1);
    let height = u32::from(hi - lo + 1) * ROW;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (note, &label) in mixture.notes.iter().zip(labels) {
        let color = Rgb(PART_COLORS[label % PART_COLORS.len()]);
        let x0 = (f64::from(note.time) * scale) as u32;
        let x1 = ((f64::from(note.end()) * scale) as u32).max(x0 + 1).min(width);
        let y0 = u32::from(hi - note.pitch) * ROW;
        for x in x0..x1 {
            for y in y0..y0 + ROW - 1 {
                img.put_pixel(x, y, color);
            }
        }
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
