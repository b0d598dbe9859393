//! Per-note model inputs: pitch, time, duration, frequency, beat and position,
//! plus the entry and pitch hints, clipping, and transposition augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{Mixture, Note, MAX_PITCH};

pub const TIME_CLIP: u32 = 4096;
pub const BEAT_CLIP: u32 = 4096;
pub const DURATION_CLIP: u32 = 192;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum TimeEncoding {
    RawTime,
    RawBeatPosition,
    TimeEmbedding,
    #[default]
    BeatPositionEmbedding,
}

impl TimeEncoding {
    pub const ALL: [TimeEncoding; 4] = [
        TimeEncoding::RawTime,
        TimeEncoding::RawBeatPosition,
        TimeEncoding::TimeEmbedding,
        TimeEncoding::BeatPositionEmbedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TimeEncoding::RawTime => "raw_time",
            TimeEncoding::RawBeatPosition => "raw_beat_position",
            TimeEncoding::TimeEmbedding => "time_embedding",
            TimeEncoding::BeatPositionEmbedding => "beat_position_embedding",
        }
    }
}

impl fmt::Display for TimeEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TimeEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TimeEncoding::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown time encoding {s:?}")))
    }
}

/// Random transposition applied to whole training sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Augmentation {
    None,
    /// -1..=+1 semitones.
    Light,
    /// -5..=+6 semitones.
    #[default]
    Strong,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [Augmentation::None, Augmentation::Light, Augmentation::Strong];

    pub fn range(self) -> (i8, i8) {
        match self {
            Augmentation::None => (0, 0),
            Augmentation::Light => (-1, 1),
            Augmentation::Strong => (-5, 6),
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> i8 {
        let (lo, hi) = self.range();
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Light => "light",
            Augmentation::Strong => "strong",
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Augmentation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown augmentation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureConfig {
    /// Learned embeddings for pitch, beat, position and duration instead of
    /// raw scalars.
    pub use_embeddings: bool,
    pub time_encoding: TimeEncoding,
    pub use_duration: bool,
    pub use_entry_hints: bool,
    pub use_pitch_hints: bool,
    pub time_clip: u32,
    pub beat_clip: u32,
    pub duration_clip: u32,
    pub augment: Augmentation,
    /// Steps per beat (a beat is a quarter note).
    pub resolution: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            use_embeddings: true,
            time_encoding: TimeEncoding::BeatPositionEmbedding,
            use_duration: false,
            use_entry_hints: false,
            use_pitch_hints: false,
            time_clip: TIME_CLIP,
            beat_clip: BEAT_CLIP,
            duration_clip: DURATION_CLIP,
            augment: Augmentation::Strong,
            resolution: 24,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_clip == 0 || self.beat_clip == 0 || self.duration_clip == 0 {
            return Err(Error::Config("clip values must be positive".into()));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("use_embeddings", self.use_embeddings.to_string()),
            ("time_encoding", self.time_encoding.to_string()),
            ("use_duration", self.use_duration.to_string()),
            ("use_entry_hints", self.use_entry_hints.to_string()),
            ("use_pitch_hints", self.use_pitch_hints.to_string()),
            ("time_clip", self.time_clip.to_string()),
            ("beat_clip", self.beat_clip.to_string()),
            ("duration_clip", self.duration_clip.to_string()),
            ("augment", self.augment.to_string()),
            ("resolution", self.resolution.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "use_embeddings" => self.use_embeddings = parse_value(key, value)?,
            "time_encoding" => self.time_encoding = value.parse()?,
            "use_duration" => self.use_duration = parse_value(key, value)?,
            "use_entry_hints" => self.use_entry_hints = parse_value(key, value)?,
            "use_pitch_hints" => self.use_pitch_hints = parse_value(key, value)?,
            "time_clip" => self.time_clip = parse_value(key, value)?,
            "beat_clip" => self.beat_clip = parse_value(key, value)?,
            "duration_clip" => self.duration_clip = parse_value(key, value)?,
            "augment" => self.augment = value.parse()?,
            "resolution" => self.resolution = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (key, value) in parse_pairs(text)? {
            if !config.set(&key, &value)? {
                return Err(Error::Config(format!("unknown feature key {key:?}")));
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Fundamental frequency in Hz of a MIDI pitch (A4 = 69 = 440 Hz).
pub fn frequency(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

/// Splits a step time into (beat, position within the beat).
pub fn beat_position(time: u32, resolution: u32) -> (u32, u32) {
    (time / resolution, time % resolution)
}

/// Entry hints: for every note and part, 1 once the part has entered
/// (at or after its first onset), 0 before and for unused parts.
pub fn entry_hints(mixture: &Mixture) -> Array2<f32> {
    let k = mixture.num_parts;
    let mut first = vec![u32::MAX; k];
    for (note, &label) in mixture.notes.iter().zip(&mixture.labels) {
        first[label] = first[label].min(note.time);
    }
    Array2::from_shape_fn((mixture.len(), k), |(i, part)| {
        if mixture.notes[i].time >= first[part] {
            1.0
        } else {
            0.0
        }
    })
}

/// Pitch hints: mean pitch of every part, 0 for unused parts.
pub fn pitch_hints(mixture: &Mixture) -> Vec<f32> {
    let k = mixture.num_parts;
    let mut sum = vec![0f64; k];
    let mut count = vec![0usize; k];
    for (note, &label) in mixture.notes.iter().zip(&mixture.labels) {
        sum[label] += f64::from(note.pitch);
        count[label] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect()
}

/// Side information derived from ground truth (or supplied by a user).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hints {
    /// `N x K` step functions.
    pub entry: Option<Array2<f32>>,
    /// `K` mean pitches.
    pub pitch: Option<Vec<f32>>,
}

impl Hints {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_mixture(mixture: &Mixture) -> Self {
        Self {
            entry: Some(entry_hints(mixture)),
            pitch: Some(pitch_hints(mixture)),
        }
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self {
            entry: self
                .entry
                .as_ref()
                .map(|e| e.slice(ndarray::s![..len.min(e.nrows()), ..]).to_owned()),
            pitch: self.pitch.clone(),
        }
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            entry: self.entry.as_ref().map(|e| {
                let start = start.min(e.nrows());
                let end = (start + len).min(e.nrows());
                e.slice(ndarray::s![start..end, ..]).to_owned()
            }),
            pitch: self.pitch.clone(),
        }
    }
}

/// Shifts every pitch by `shift` semitones, clamping to the MIDI range.
/// Labels are untouched; the result is re-sorted into canonical order.
pub fn transpose_augment(mixture: &Mixture, shift: i8) -> Mixture {
    if shift == 0 {
        return mixture.clone();
    }
    let mut tagged: Vec<(Note, usize)> = mixture
        .notes
        .iter()
        .zip(&mixture.labels)
        .map(|(n, &l)| {
            let pitch = (i16::from(n.pitch) + i16::from(shift)).clamp(0, i16::from(MAX_PITCH)) as u8;
            (Note { pitch, ..*n }, l)
        })
        .collect();
    tagged.sort_unstable();
    let (notes, labels) = tagged.into_iter().unzip();
    Mixture {
        notes,
        labels,
        num_parts: mixture.num_parts,
    }
}

/// The time columns selected by a [`TimeEncoding`].
#[derive(Clone, Debug, PartialEq)]
pub enum TimeColumns {
    /// Clipped time divided by the clip.
    RawTime(Vec<f32>),
    /// Clipped beat divided by the beat clip, position divided by resolution.
    RawBeatPosition(Vec<f32>, Vec<f32>),
    /// Clipped time as an embedding index in `0..=time_clip`.
    TimeIndex(Vec<u32>),
    /// Clipped beat in `0..=beat_clip` and position in `0..resolution`.
    BeatPositionIndex(Vec<u32>, Vec<u32>),
}

/// Encoded model inputs for one mixture (`N` rows).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub pitch: Vec<u8>,
    pub frequency: Vec<f32>,
    pub time: TimeColumns,
    /// Clipped durations, present when the config asks for them.
    pub duration: Option<Vec<u32>>,
    pub entry_hints: Option<Array2<f32>>,
    pub pitch_hints: Option<Vec<f32>>,
    pub num_parts: usize,
}

impl FeatureTensor {
    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> FeatureTensor {
        let r = start..end;
        let time = match &self.time {
            TimeColumns::RawTime(t) => TimeColumns::RawTime(t[r.clone()].to_vec()),
            TimeColumns::RawBeatPosition(b, p) => TimeColumns::RawBeatPosition(b[r.clone()].to_vec(), p[r.clone()].to_vec()),
            TimeColumns::TimeIndex(t) => TimeColumns::TimeIndex(t[r.clone()].to_vec()),
            TimeColumns::BeatPositionIndex(b, p) => TimeColumns::BeatPositionIndex(b[r.clone()].to_vec(), p[r.clone()].to_vec()),
        };
        FeatureTensor {
            pitch: self.pitch[r.clone()].to_vec(),
            frequency: self.frequency[r.clone()].to_vec(),
            time,
            duration: self.duration.as_ref().map(|d| d[r.clone()].to_vec()),
            entry_hints: self.entry_hints.as_ref().map(|e| e.slice(ndarray::s![r.clone(), ..]).to_owned()),
            pitch_hints: self.pitch_hints.clone(),
            num_parts: self.num_parts,
        }
    }
}

/// Encodes a mixture for a classifier. Deterministic and pure.
pub fn encode(mixture: &Mixture, hints: &Hints, config: &FeatureConfig) -> Result<FeatureTensor> {
    config.validate()?;
    let n = mixture.len();
    let entry_hints = if config.use_entry_hints {
        let e = hints.entry.as_ref().ok_or(Error::MissingHints("entry hints"))?;
        if e.nrows() != n || e.ncols() != mixture.num_parts {
            return Err(Error::LengthMismatch {
                what: "entry hint rows",
                left: e.nrows(),
                right: n,
            });
        }
        Some(e.clone())
    } else {
        None
    };
    let pitch_hints = if config.use_pitch_hints {
        let p = hints.pitch.as_ref().ok_or(Error::MissingHints("pitch hints"))?;
        if p.len() != mixture.num_parts {
            return Err(Error::LengthMismatch {
                what: "pitch hints and part count",
                left: p.len(),
                right: mixture.num_parts,
            });
        }
        Some(p.clone())
    } else {
        None
    };

    let times = mixture.notes.iter().map(|note| note.time);
    let time = match config.time_encoding {
        TimeEncoding::RawTime => TimeColumns::RawTime(
            times
                .map(|t| t.min(config.time_clip) as f32 / config.time_clip as f32)
                .collect(),
        ),
        TimeEncoding::TimeEmbedding => TimeColumns::TimeIndex(times.map(|t| t.min(config.time_clip)).collect()),
        TimeEncoding::RawBeatPosition | TimeEncoding::BeatPositionEmbedding => {
            let (beats, positions): (Vec<u32>, Vec<u32>) = times
                .map(|t| {
                    let (b, p) = beat_position(t, config.resolution);
                    (b.min(config.beat_clip), p)
                })
                .unzip();
            if config.time_encoding == TimeEncoding::RawBeatPosition {
                TimeColumns::RawBeatPosition(
                    beats.iter().map(|&b| b as f32 / config.beat_clip as f32).collect(),
                    positions.iter().map(|&p| p as f32 / config.resolution as f32).collect(),
                )
            } else {
                TimeColumns::BeatPositionIndex(beats, positions)
            }
        }
    };

    Ok(FeatureTensor {
        pitch: mixture.notes.iter().map(|n| n.pitch).collect(),
        frequency: mixture.notes.iter().map(|n| frequency(n.pitch) as f32).collect(),
        time,
        duration: config
            .use_duration
            .then(|| mixture.notes.iter().map(|n| n.duration.min(config.duration_clip)).collect()),
        entry_hints,
        pitch_hints,
        num_parts: mixture.num_parts,
    })
}
