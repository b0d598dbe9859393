//! General MIDI instrument families for the pop ensemble.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::{Song, Track};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Piano,
    Guitar,
    Bass,
    Strings,
    Brass,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Piano,
        Family::Guitar,
        Family::Bass,
        Family::Strings,
        Family::Brass,
    ];

    pub fn part_id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Piano => "piano",
            Family::Guitar => "guitar",
            Family::Bass => "bass",
            Family::Strings => "strings",
            Family::Brass => "brass",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown instrument family {s:?}")))
    }
}

/// Program (0-127) to family. Programs mapped to `None` are discarded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyMap {
    map: [Option<Family>; 128],
}

impl Default for FamilyMap {
    /// General MIDI 1 families: each block of eight programs is one family.
    fn default() -> Self {
        let mut map = [None; 128];
        for (program, slot) in map.iter_mut().enumerate() {
            *slot = match program / 8 {
                0 => Some(Family::Piano),
                3 => Some(Family::Guitar),
                4 => Some(Family::Bass),
                5 => Some(Family::Strings),
                7 => Some(Family::Brass),
                _ => None,
            };
        }
        Self { map }
    }
}

impl FamilyMap {
    pub fn family(&self, program: u8) -> Option<Family> {
        self.map.get(program as usize).copied().flatten()
    }

    /// Parses `program,family` lines (family may be `none`). Lines starting
    /// with `#` are ignored. Unlisted programs keep their General MIDI family.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (program, family) = line.split_once(',').ok_or_else(|| Error::Dataset {
                line: i + 1,
                msg: "expected `program,family`".into(),
            })?;
            let program: u8 = program.trim().parse().map_err(|_| Error::Dataset {
                line: i + 1,
                msg: format!("bad program {program:?}"),
            })?;
            if program > 127 {
                return Err(Error::Dataset {
                    line: i + 1,
                    msg: format!("program {program} out of range"),
                });
            }
            out.map[program as usize] = if family.trim().eq_ignore_ascii_case("none") {
                None
            } else {
                Some(family.parse()?)
            };
        }
        Ok(out)
    }
}

/// Relabels a song into the five-family pop ensemble. Tracks of the same
/// family merge into one part; tracks outside the five families (or without
/// a known program) are dropped.
pub fn map_pop_families(song: &Song, families: &FamilyMap) -> Song {
    let mut merged: BTreeMap<Family, Vec<_>> = BTreeMap::new();
    for track in &song.tracks {
        if let Some(family) = track.program.and_then(|p| families.family(p)) {
            merged.entry(family).or_default().extend_from_slice(&track.notes);
        }
    }
    let tracks = merged
        .into_iter()
        .map(|(family, notes)| {
            Track::new(family.part_id(), family.name(), notes)
        })
        .collect();
    let mut out = Song::new(song.source_id.clone(), song.resolution, tracks);
    out.num_parts = Family::ALL.len();
    out.tempo_map = song.tempo_map.clone();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Note;

    fn track(part: usize, program: u8, pitches: &[u8]) -> Track {
        let notes = pitches
            .iter()
            .enumerate()
            .map(|(i, &p)| Note { time: i as u32 * 4, pitch: p, duration: 4 })
            .collect();
        Track::new(part, format!("prog {program}"), notes).with_program(program)
    }

    #[test]
    fn general_midi_families() {
        let map = FamilyMap::default();
        assert_eq!(map.family(33), Some(Family::Bass));
        assert_eq!(map.family(0), Some(Family::Piano));
        assert_eq!(map.family(25), Some(Family::Guitar));
        assert_eq!(map.family(40), Some(Family::Strings));
        assert_eq!(map.family(61), Some(Family::Brass));
        assert_eq!(map.family(114), None);
        assert_eq!(map.family(48), None);
    }

    #[test]
    fn guitars_merge_and_steel_drums_drop() {
        let song = Song::new(
            "pop",
            24,
            vec![
                track(0, 25, &[60, 64]),
                track(1, 26, &[62]),
                track(2, 114, &[70]),
                track(3, 33, &[40]),
            ],
        );
        let out = map_pop_families(&song, &FamilyMap::default());
        assert_eq!(out.num_parts, 5);
        assert_eq!(out.tracks.len(), 2);
        let guitar = &out.tracks[0];
        assert_eq!(guitar.part_id, Family::Guitar.part_id());
        let mut want: Vec<Note> = song.tracks[0].notes.iter().chain(&song.tracks[1].notes).copied().collect();
        want.sort();
        assert_eq!(guitar.notes, want);
        assert_eq!(out.tracks[1].part_id, Family::Bass.part_id());
        assert!(out.note_count() <= song.note_count());
    }

    #[test]
    fn custom_map_overrides() {
        let map = FamilyMap::parse("# lead synths count as strings\n80, strings\n33,none\n").unwrap();
        assert_eq!(map.family(80), Some(Family::Strings));
        assert_eq!(map.family(33), None);
        assert_eq!(map.family(34), Some(Family::Bass));
        assert!(FamilyMap::parse("200,piano").is_err());
        assert!(FamilyMap::parse("1,organ").is_err());
    }
}
