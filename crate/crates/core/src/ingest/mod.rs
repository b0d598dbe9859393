//! Corpus ingestion: MIDI parsing, cleaning, quantization, instrument-family
//! mapping, train/valid/test splits and the on-disk dataset format.

mod dataset;
mod families;
mod quantize;
mod smf;
mod split;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};

pub use dataset::{Dataset, DatasetEntry};
pub use families::{map_pop_families, Family, FamilyMap};
pub use quantize::{quantize, TimeBase, ABSOLUTE_TIME_QPM, DEFAULT_RESOLUTION};
pub use smf::{parse_smf, write_smf, ParseOptions, DRUM_CHANNEL};
pub use split::{split_corpus, DatasetManifest, ManifestEntry, Split, SplitTotals};

use crate::error::{Error, Result};
use crate::types::{Song, Track};

/// Corpus-specific cleaning and labeling rules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GenreProfile {
    /// Four-voice chorales; voices are matched to SATB by track name.
    Chorale,
    /// String quartets in track order.
    Quartet,
    /// Chiptune music in absolute time; the noise channel is dropped.
    Game,
    /// Pop music mapped onto five instrument families; drums are dropped.
    Pop,
    #[default]
    Generic,
}

impl GenreProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            GenreProfile::Chorale => "chorale",
            GenreProfile::Quartet => "quartet",
            GenreProfile::Game => "game",
            GenreProfile::Pop => "pop",
            GenreProfile::Generic => "generic",
        }
    }

    /// Fixed part names, if the profile has a fixed ensemble.
    pub fn ensemble(self) -> Option<Vec<String>> {
        let names: &[&str] = match self {
            GenreProfile::Chorale => &["soprano", "alto", "tenor", "bass"],
            GenreProfile::Quartet => &["first violin", "second violin", "viola", "cello"],
            GenreProfile::Game => &["pulse wave I", "pulse wave II", "triangle wave"],
            GenreProfile::Pop => &["piano", "guitar", "bass", "strings", "brass"],
            GenreProfile::Generic => return None,
        };
        Some(names.iter().map(|s| s.to_string()).collect())
    }

    pub fn time_base(self) -> TimeBase {
        match self {
            GenreProfile::Game => TimeBase::Absolute {
                qpm: ABSOLUTE_TIME_QPM,
            },
            _ => TimeBase::Metrical,
        }
    }

    pub fn drops_drums(self) -> bool {
        matches!(self, GenreProfile::Game | GenreProfile::Pop)
    }
}

impl fmt::Display for GenreProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GenreProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "chorale" | "bach" => GenreProfile::Chorale,
            "quartet" | "string" => GenreProfile::Quartet,
            "game" | "nes" => GenreProfile::Game,
            "pop" | "lmd" => GenreProfile::Pop,
            "generic" => GenreProfile::Generic,
            other => return Err(Error::Config(format!("unknown genre profile {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusConfig {
    pub resolution: u32,
    pub profile: GenreProfile,
    pub split_ratio: [u32; 3],
    pub split_seed: u64,
    pub family_map_path: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            profile: GenreProfile::Generic,
            split_ratio: [8, 1, 1],
            split_seed: 0,
            family_map_path: None,
        }
    }
}

impl CorpusConfig {
    pub fn new(profile: GenreProfile) -> Self {
        Self {
            profile,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.split_ratio.contains(&0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn family_map(&self) -> Result<FamilyMap> {
        match &self.family_map_path {
            Some(path) => FamilyMap::parse(&fs::read_to_string(path)?),
            None => Ok(FamilyMap::default()),
        }
    }
}

fn chorale_role(name: &str) -> Option<usize> {
    let name = name.trim().to_ascii_lowercase();
    ["soprano", "alto", "tenor", "bass"]
        .iter()
        .position(|role| name.starts_with(role))
}

/// Renumbers tracks so that part ids follow the profile's ensemble.
fn assign_parts(mut song: Song, profile: GenreProfile) -> Song {
    if profile == GenreProfile::Chorale {
        let roles: Vec<Option<usize>> = song.tracks.iter().map(|t| chorale_role(&t.name)).collect();
        let mut seen = [false; 4];
        let unique = roles
            .iter()
            .all(|r| r.is_some_and(|k| !std::mem::replace(&mut seen[k], true)));
        if unique {
            for (track, role) in song.tracks.iter_mut().zip(roles) {
                track.part_id = role.unwrap_or_default();
            }
            song.tracks.sort_by_key(|t| t.part_id);
            song.num_parts = 4;
            return song;
        }
    }
    for (k, track) in song.tracks.iter_mut().enumerate() {
        track.part_id = k;
    }
    song.num_parts = song.tracks.len();
    if let Some(names) = profile.ensemble() {
        song.num_parts = song.num_parts.max(names.len());
    }
    song
}

/// Parses one MIDI file and applies the profile's cleaning rules.
///
/// Returns `Ok(None)` when the cleaned song has fewer than two active parts.
pub fn load_song(bytes: &[u8], source_id: &str, config: &CorpusConfig, families: &FamilyMap) -> Result<Option<Song>> {
    let opts = ParseOptions {
        drop_drums: config.profile.drops_drums(),
    };
    let raw = parse_smf(bytes, source_id, opts)?;
    let mut song = match config.profile {
        GenreProfile::Pop => map_pop_families(&raw, families),
        profile => assign_parts(raw, profile),
    };
    song.tracks.retain(|t: &Track| !t.notes.is_empty());
    let song = quantize(&song, config.resolution, config.profile.time_base());
    if song.active_parts() < 2 {
        debug!("{source_id}: discarded, {} active part(s)", song.active_parts());
        return Ok(None);
    }
    song.validate()?;
    Ok(Some(song))
}

/// Result of loading a directory of MIDI files.
#[derive(Debug, Default)]
pub struct Corpus {
    pub songs: Vec<Song>,
    /// Files dropped during cleaning, with the reason.
    pub discarded: Vec<(String, String)>,
}

/// Lists `.mid`/`.midi` files under `dir`, sorted by path.
pub fn midi_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
            {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

pub fn source_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads and cleans every MIDI file under `dir`. Unparseable files are
/// reported as discarded rather than aborting the whole corpus.
pub fn load_corpus(dir: &Path, config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let families = config.family_map()?;
    let mut corpus = Corpus::default();
    for path in midi_files(dir)? {
        let id = source_id(&path);
        let bytes = fs::read(&path)?;
        match load_song(&bytes, &id, config, &families) {
            Ok(Some(song)) => corpus.songs.push(song),
            Ok(None) => corpus.discarded.push((id, "fewer than two active parts".into())),
            Err(e) => corpus.discarded.push((id, e.to_string())),
        }
    }
    info!(
        "loaded {} songs from {} ({} discarded)",
        corpus.songs.len(),
        dir.display(),
        corpus.discarded.len()
    );
    Ok(corpus)
}

/// Splits a cleaned corpus and downmixes it into a dataset.
pub fn build_dataset(corpus: &Corpus, config: &CorpusConfig) -> Result<(Dataset, DatasetManifest)> {
    let manifest = split_corpus(&corpus.songs, config.split_ratio, config.split_seed, None)?;
    let dataset = Dataset::from_songs(&corpus.songs, &manifest, config)?;
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Note;

    fn satb_song(names: [&str; 4]) -> Song {
        let tracks = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                Track::new(i, *n, vec![Note { time: 0, pitch: 70 - 7 * i as u8, duration: 480 }])
            })
            .collect();
        Song::new("c", 480, tracks)
    }

    #[test]
    fn chorale_voices_follow_names() {
        let song = assign_parts(satb_song(["Bass", "Tenor", "Alto", "Soprano"]), GenreProfile::Chorale);
        let names: Vec<_> = song.tracks.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["Soprano", "Alto", "Tenor", "Bass"]);
        assert_eq!(song.num_parts, 4);
    }

    #[test]
    fn unknown_names_fall_back_to_track_order() {
        let song = assign_parts(satb_song(["a", "b", "c", "d"]), GenreProfile::Chorale);
        let parts: Vec<_> = song.tracks.iter().map(|t| t.part_id).collect();
        assert_eq!(parts, [0, 1, 2, 3]);
    }

    #[test]
    fn percussion_only_pop_file_is_discarded() {
        let mut bytes = b"MThd\0\0\0\x06\0\0\0\x01\x01\xE0MTrk".to_vec();
        let track = [0x00, 0x99, 36, 100, 0x60, 0x89, 36, 0, 0x00, 0x99, 38, 100, 0x60, 0x89, 38, 0, 0x00, 0xFF, 0x2F, 0x00];
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);
        let config = CorpusConfig::new(GenreProfile::Pop);
        let loaded = load_song(&bytes, "drums", &config, &FamilyMap::default()).unwrap();
        assert!(loaded.is_none());
    }

    #[test]
    fn profile_names_parse() {
        for p in [
            GenreProfile::Chorale,
            GenreProfile::Quartet,
            GenreProfile::Game,
            GenreProfile::Pop,
            GenreProfile::Generic,
        ] {
            assert_eq!(p.as_str().parse::<GenreProfile>().unwrap(), p);
        }
        assert!("polka".parse::<GenreProfile>().is_err());
    }
}
