use crate::types::{Note, Song, TempoChange, DEFAULT_MICROS_PER_QUARTER};

pub const DEFAULT_RESOLUTION: u32 = 24;
/// Reference tempo for corpora recorded in absolute time.
pub const ABSOLUTE_TIME_QPM: u32 = 125;

/// How raw ticks relate to the musical grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeBase {
    /// Ticks are fractions of a quarter note.
    Metrical,
    /// Ticks are wall-clock time (through the tempo map); the grid is laid
    /// at a fixed tempo of `qpm` quarter notes per minute.
    Absolute { qpm: u32 },
}

fn round_div(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

/// Tick to microseconds (scaled by `tpq`) through the tempo map.
fn scaled_micros(tick: u32, tempo_map: &[TempoChange]) -> u128 {
    let mut total = 0u128;
    let mut last_tick = 0u32;
    let mut mpq = DEFAULT_MICROS_PER_QUARTER;
    for change in tempo_map.iter().take_while(|c| c.tick <= tick) {
        total += u128::from(change.tick - last_tick) * u128::from(mpq);
        last_tick = change.tick;
        mpq = change.micros_per_quarter;
    }
    total + u128::from(tick - last_tick) * u128::from(mpq)
}

/// Resamples a song onto a grid of `resolution` steps per quarter note.
///
/// Times round half up; durations too, clamped to at least one step. In
/// absolute mode, the tempo map becomes a single change at the reference
/// tempo so that quantizing again is the identity.
pub fn quantize(song: &Song, resolution: u32, base: TimeBase) -> Song {
    let tpq = u128::from(song.resolution.max(1));
    let res = u128::from(resolution);
    let mut tempo_map = song.tempo_map.clone();
    tempo_map.sort_by_key(|t| t.tick);

    let to_step: Box<dyn Fn(u32) -> u32> = match base {
        TimeBase::Metrical => Box::new(move |t| round_div(u128::from(t) * res, tpq) as u32),
        TimeBase::Absolute { qpm } => {
            let den = tpq * 60_000_000;
            let tempo_map = tempo_map.clone();
            Box::new(move |t| {
                round_div(scaled_micros(t, &tempo_map) * u128::from(qpm) * res, den) as u32
            })
        }
    };

    let mut out = song.clone();
    for track in &mut out.tracks {
        for note in &mut track.notes {
            let time = to_step(note.time);
            let duration = match base {
                TimeBase::Metrical => to_step(note.duration),
                TimeBase::Absolute { .. } => to_step(note.end()).saturating_sub(time),
            };
            *note = Note {
                time,
                pitch: note.pitch,
                duration: duration.max(1),
            };
        }
        track.notes.sort_unstable();
    }
    out.resolution = resolution;
    out.tempo_map = match base {
        TimeBase::Metrical => {
            let mut map: Vec<TempoChange> = tempo_map
                .iter()
                .map(|t| TempoChange {
                    tick: to_step(t.tick),
                    micros_per_quarter: t.micros_per_quarter,
                })
                .collect();
            map.dedup_by_key(|t| t.tick);
            map
        }
        TimeBase::Absolute { qpm } => vec![TempoChange {
            tick: 0,
            micros_per_quarter: 60_000_000 / qpm,
        }],
    };
    out
}
