//! Standard experiment rows and synthetic corpora with known answers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{ExperimentSpec, Method};
use crate::error::Result;
use crate::ingest::{CorpusConfig, Dataset, DatasetManifest, GenreProfile, ManifestEntry, Split};
use crate::neural::Arch;
use crate::types::{Note, Song, Track};

/// Every row of the method comparison: baselines, the four architectures,
/// and the four architectures again with entry hints.
pub fn comparison_specs(dataset: &Path, output_dir: &Path) -> Vec<ExperimentSpec> {
    let mut specs: Vec<ExperimentSpec> = [
        Method::Zones,
        Method::Mlp,
        Method::Neural(Arch::Lstm),
        Method::Neural(Arch::TransformerDec),
        Method::ZonesOracle,
        Method::MlpOracle,
        Method::Neural(Arch::BiLstm),
        Method::Neural(Arch::TransformerEnc),
        Method::ClosestPitch,
        Method::ClosestPitchMono,
    ]
    .into_iter()
    .map(|m| ExperimentSpec::new(m, dataset, output_dir))
    .collect();
    for arch in [Arch::Lstm, Arch::TransformerDec, Arch::BiLstm, Arch::TransformerEnc] {
        let mut spec = ExperimentSpec::new(Method::Neural(arch), dataset, output_dir);
        spec.model.features.use_entry_hints = true;
        spec.name = format!("{} (+entry hints)", spec.name);
        specs.push(spec);
    }
    specs
}

/// Assigns songs to splits 8:1:1 by index and builds a dataset.
fn dataset_from_songs(songs: &[Song], part_names: Vec<String>) -> Result<Dataset> {
    let entries = songs
        .iter()
        .enumerate()
        .map(|(i, s)| ManifestEntry {
            source_id: s.source_id.clone(),
            split: match i % 10 {
                8 => Split::Valid,
                9 => Split::Test,
                _ => Split::Train,
            },
            note_count: s.note_count(),
            parts: s.num_parts,
        })
        .collect();
    let mut ds = Dataset::from_songs(songs, &DatasetManifest { entries }, &CorpusConfig::new(GenreProfile::Generic))?;
    ds.part_names = part_names;
    Ok(ds)
}

/// A monophonic random line within `lo..=hi`.
fn line(rng: &mut ChaCha8Rng, lo: u8, hi: u8, length: u32) -> Vec<Note> {
    let mut notes = Vec::new();
    let mut t = rng.random_range(0..2) * 12;
    while t < length {
        let duration = [6, 12, 12, 24][rng.random_range(0..4)];
        if rng.random_bool(0.85) {
            notes.push(Note {
                time: t,
                pitch: rng.random_range(lo..=hi),
                duration,
            });
        }
        t += duration;
    }
    notes
}

/// Four parts, each confined to its own octave (C2–B2, C3–B3, C4–B4,
/// C5–B5), listed from low to high. Zones separate it perfectly.
pub fn disjoint_octaves_dataset(songs: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let songs: Vec<Song> = (0..songs)
        .map(|s| {
            let tracks = (0..4)
                .map(|k| {
                    let lo = 36 + 12 * k as u8;
                    Track::new(k, format!("octave {}", k + 2), line(&mut rng, lo, lo + 11, 24 * 16))
                })
                .collect();
            Song::new(format!("octaves{s:04}"), 24, tracks)
        })
        .collect();
    dataset_from_songs(&songs, (2..6).map(|o| format!("octave {o}")).collect())
}

/// Two parts with the same role: in every song one plays above the other,
/// but which one is a coin flip. Only side information such as pitch hints
/// can tell the labels apart.
pub fn interchangeable_dataset(songs: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let songs: Vec<Song> = (0..songs)
        .map(|s| {
            let low = line(&mut rng, 50, 62, 24 * 16);
            let high = line(&mut rng, 65, 77, 24 * 16);
            let (a, b) = if rng.random_bool(0.5) { (low, high) } else { (high, low) };
            let tracks = vec![Track::new(0, "pulse 1", a), Track::new(1, "pulse 2", b)];
            Song::new(format!("pulses{s:04}"), 24, tracks)
        })
        .collect();
    dataset_from_songs(&songs, vec!["pulse 1".into(), "pulse 2".into()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{fit_zones, ZoneSearch};
    use crate::types::accuracy;

    #[test]
    fn octave_corpus_is_zone_separable() {
        let ds = disjoint_octaves_dataset(30, 1).unwrap();
        assert_eq!(ds.num_parts(), 4);
        assert_eq!(ds.mixtures(Split::Test).len(), 3);
        let zones = fit_zones(&ds.mixtures(Split::Train), ZoneSearch::default()).unwrap();
        for m in ds.mixtures(Split::Test) {
            assert_eq!(accuracy(&zones.predict(m), m).unwrap(), 1.0);
        }
    }

    #[test]
    fn interchangeable_corpus_defeats_zones() {
        let ds = interchangeable_dataset(200, 2).unwrap();
        let zones = fit_zones(&ds.mixtures(Split::Train), ZoneSearch::default()).unwrap();
        let test = ds.mixtures(Split::Test);
        let mean = test.iter().map(|m| accuracy(&zones.predict(m), m).unwrap()).sum::<f64>() / test.len() as f64;
        assert!(mean < 0.8, "{mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(interchangeable_dataset(10, 5).unwrap(), interchangeable_dataset(10, 5).unwrap());
    }

    #[test]
    fn comparison_rows_are_distinct() {
        let specs = comparison_specs(Path::new("d"), Path::new("o"));
        assert_eq!(specs.len(), 14);
        let names: std::collections::HashSet<_> = specs.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names.len(), specs.len());
    }
}
