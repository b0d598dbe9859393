use std::path::PathBuf;

use partsep::ingest::{build_dataset, load_corpus, CorpusConfig, GenreProfile, Split};

fn chorale_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/bach-chorales")
}

#[test]
fn chorale_corpus_matches_published_statistics() {
    let config = CorpusConfig::new(GenreProfile::Chorale);
    let corpus = load_corpus(&chorale_dir(), &config).unwrap();
    assert!(corpus.discarded.is_empty(), "{:?}", corpus.discarded);
    assert_eq!(corpus.songs.len(), 409);
    let notes: usize = corpus.songs.iter().map(|s| s.note_count()).sum();
    let rel = (notes as f64 - 96_600.0).abs() / 96_600.0;
    assert!(rel <= 0.02, "{notes} notes");
    assert!(corpus.songs.iter().all(|s| s.num_parts == 4 && s.resolution == 24));

    let (dataset, manifest) = build_dataset(&corpus, &config).unwrap();
    assert_eq!(manifest.totals(Split::Train).files, 327);
    assert_eq!(manifest.totals(Split::Valid).files, 41);
    assert_eq!(manifest.totals(Split::Test).files, 41);
    assert_eq!(dataset.note_count(), notes);

    // bass is the most common label
    let mut counts = [0usize; 4];
    for e in &dataset.entries {
        for &l in &e.mixture.labels {
            counts[l] += 1;
        }
    }
    let bass_share = counts[3] as f64 / notes as f64;
    eprintln!("notes {notes}, label counts {counts:?}, bass share {bass_share:.4}");
    assert_eq!(counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0, 3);
}

/// Chance level is a statement about random initialization, so it is
/// checked on the mean over several seeds; single draws spread by about
/// ±7 pp because a random readout can correlate with pitch either way.
#[test]
fn untrained_models_are_at_chance() {
    use partsep::features::Hints;
    use partsep::neural::{Arch, Model, ModelConfig};
    use partsep::Tally;

    let config = CorpusConfig::new(GenreProfile::Chorale);
    let corpus = load_corpus(&chorale_dir(), &config).unwrap();
    let (dataset, _) = build_dataset(&corpus, &config).unwrap();
    let seeds = 6;
    for arch in Arch::ALL {
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let model = Model::<f32>::new(ModelConfig::new(arch, 4), seed).unwrap();
            let mut tally = Tally::default();
            for m in dataset.mixtures(Split::Test) {
                let p = model.predict(m, &Hints::none(), arch.mode()).unwrap();
                tally.add(&p.labels, &m.labels);
            }
            accs.push(tally.accuracy());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() <= 0.05, "{arch}: mean {mean}, runs {accs:?}");
    }
}
