//! Running experiments, ablation matrices and result tables.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use log::info;

use super::separator::Separator;
use super::spec::{ExperimentSpec, Method};
use super::table::{percent, ResultTable};
use crate::baselines::train_mlp;
use crate::error::{Error, Result};
use crate::features::{Augmentation, Hints, TimeEncoding};
use crate::ingest::{Dataset, Split};
use crate::neural::{train, Model, LOG_HEADER};
use crate::types::{Mixture, Tally};

/// What to do when a trained method has no checkpoint yet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CheckpointPolicy {
    #[default]
    TrainIfMissing,
    Require,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunScores {
    pub repetition: usize,
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub method: Method,
    pub entry_hints: bool,
    pub hash: String,
    pub runs: Vec<RunScores>,
}

impl ExperimentResult {
    pub fn mean(&self) -> RunScores {
        let n = self.runs.len().max(1) as f64;
        let sum = |f: fn(&RunScores) -> f64| self.runs.iter().map(f).sum::<f64>() / n;
        RunScores {
            repetition: self.runs.len(),
            train: sum(|r| r.train),
            valid: sum(|r| r.valid),
            test: sum(|r| r.test),
        }
    }
}

/// Accuracy of a separator over mixtures, with hints from the ground truth.
pub fn evaluate_separator(sep: &Separator, mixtures: &[&Mixture]) -> Result<Tally> {
    let mut tally = Tally::default();
    for m in mixtures {
        let p = sep.predict(m, &Hints::from_mixture(m))?;
        tally.add(&p.labels, &m.labels);
    }
    Ok(tally)
}

/// Per-sample accuracies, in input order.
pub fn per_sample_accuracy(sep: &Separator, mixtures: &[&Mixture]) -> Result<Vec<f64>> {
    mixtures
        .iter()
        .map(|m| Ok(evaluate_separator(sep, &[m])?.accuracy()))
        .collect()
}

/// Where the trained model of one repetition lives.
pub fn checkpoint_path(spec: &ExperimentSpec, repetition: usize) -> Result<PathBuf> {
    Ok(spec
        .output_dir
        .join(format!("{}-r{repetition}.ckpt", spec.training_key()?)))
}

/// Loads the trained separator of one repetition, training and saving it
/// first if allowed.
pub fn obtain_separator(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    repetition: usize,
    policy: CheckpointPolicy,
) -> Result<Separator> {
    let k = dataset.num_parts();
    let train_set = dataset.mixtures(Split::Train);
    let valid_set = dataset.mixtures(Split::Valid);
    match spec.method {
        Method::Zones => return Separator::fit_zones(&train_set),
        Method::ZonesOracle => return Ok(Separator::ZonesOracle { num_parts: k }),
        Method::ClosestPitch => return Ok(Separator::ClosestPitch { num_parts: k, mono: false }),
        Method::ClosestPitchMono => return Ok(Separator::ClosestPitch { num_parts: k, mono: true }),
        _ => {}
    }
    let path = checkpoint_path(spec, repetition)?;
    let oracle = spec.method == Method::MlpOracle;
    if path.exists() {
        let (sep, _) = Separator::load(&path)?;
        return Ok(match sep {
            Separator::Mlp { model, .. } => Separator::Mlp { model, oracle },
            other => other,
        });
    }
    if policy == CheckpointPolicy::Require {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    fs::create_dir_all(&spec.output_dir)?;
    let seed_offset = repetition as u64;
    let started = Instant::now();
    let mut log = String::new();
    let sep = match spec.method {
        Method::Mlp | Method::MlpOracle => {
            let config = crate::baselines::MlpConfig {
                num_parts: k,
                resolution: dataset.resolution,
                ..spec.mlp
            };
            let tc = crate::baselines::MlpTrainConfig {
                seed: spec.mlp_train.seed + seed_offset,
                ..spec.mlp_train
            };
            info!("{}: training MLP, repetition {repetition}", spec.name);
            let model = train_mlp(config, &train_set, &valid_set, &tc)?;
            Separator::Mlp {
                model: Box::new(model),
                oracle,
            }
        }
        Method::Neural(_) => {
            let mut config = spec.model;
            config.num_parts = k;
            config.features.resolution = dataset.resolution;
            let tc = crate::neural::TrainConfig {
                seed: spec.train.seed + seed_offset,
                ..spec.train
            };
            log.push_str(LOG_HEADER);
            log.push('\n');
            let name = spec.name.clone();
            let (model, report) = train(config, &train_set, &valid_set, &tc, |e| {
                info!("{name}: {}", e.to_line());
                log.push_str(&e.to_line());
                log.push('\n');
            })?;
            log.push_str(&format!("best_epoch\t{}\n", report.best_epoch));
            Separator::Neural(Box::new(model))
        }
        _ => unreachable!("untrained methods returned above"),
    };
    log.push_str(&format!("{SECONDS_KEY}\t{:.1}\n", started.elapsed().as_secs_f64()));
    fs::write(path.with_extension("log"), log)?;
    sep.save(&path, &dataset.part_names)?;
    Ok(sep)
}

const SECONDS_KEY: &str = "train_seconds";

/// Wall-clock training time recorded next to a checkpoint, if any.
pub fn training_seconds(spec: &ExperimentSpec, repetition: usize) -> Result<Option<f64>> {
    let path = checkpoint_path(spec, repetition)?.with_extension("log");
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(None);
    };
    Ok(text
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(SECONDS_KEY)?.trim().parse().ok()))
}

/// Runs every repetition of an experiment and scores each split.
pub fn run_experiment(spec: &ExperimentSpec, policy: CheckpointPolicy) -> Result<ExperimentResult> {
    spec.validate()?;
    let dataset = Dataset::load(&spec.dataset)?;
    let hash = spec.hash()?;
    let mut runs = Vec::with_capacity(spec.repetitions);
    for repetition in 0..spec.repetitions {
        let sep = obtain_separator(spec, &dataset, repetition, policy)?;
        let score = |split| evaluate_separator(&sep, &dataset.mixtures(split)).map(|t| t.accuracy());
        runs.push(RunScores {
            repetition,
            train: score(Split::Train)?,
            valid: score(Split::Valid)?,
            test: score(Split::Test)?,
        });
        info!("{} [{hash}] repetition {repetition}: test {:.4}", spec.name, runs[repetition].test);
    }
    Ok(ExperimentResult {
        name: spec.name.clone(),
        method: spec.method,
        entry_hints: matches!(spec.method, Method::Neural(_)) && spec.model.features.use_entry_hints,
        hash,
        runs,
    })
}

pub const TABLE_COLUMNS: [&str; 6] = ["model", "spec", "runs", "train", "valid", "test"];

/// One row per experiment (mean over repetitions), in the given order.
pub fn results_table(title: &str, results: &[ExperimentResult]) -> ResultTable {
    let mut t = ResultTable::new(title, &TABLE_COLUMNS);
    for r in results {
        let m = r.mean();
        t.push(vec![
            r.name.clone(),
            r.hash.clone(),
            r.runs.len().to_string(),
            percent(m.train),
            percent(m.valid),
            percent(m.test),
        ]);
    }
    t
}

/// The method comparison table, rows in the conventional order: online,
/// oracle, offline, then the entry-hint groups.
pub fn comparison_table(results: &[ExperimentResult]) -> ResultTable {
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|r| r.method.table_rank(r.entry_hints));
    results_table("Method comparison (accuracy %)", &sorted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationGroup {
    Features,
    TimeEncoding,
    Augmentation,
}

impl AblationGroup {
    pub fn title(self) -> &'static str {
        match self {
            AblationGroup::Features => "Input features (accuracy %)",
            AblationGroup::TimeEncoding => "Time encoding (accuracy %)",
            AblationGroup::Augmentation => "Data augmentation (accuracy %)",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub label: String,
    pub spec: ExperimentSpec,
}

/// The ablation matrix around `base`: feature sets {Emb, Dur, EH, PH}, the
/// four time encodings and the three augmentation levels. Rows that equal
/// the base share its hash and checkpoint.
pub fn ablation_specs(base: &ExperimentSpec) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    let mut plain = base.clone();
    plain.model.features.use_embeddings = true;
    plain.model.features.use_duration = false;
    plain.model.features.use_entry_hints = false;
    plain.model.features.use_pitch_hints = false;
    let features: [(&str, bool, bool, bool, bool); 6] = [
        ("-", false, false, false, false),
        ("Emb", true, false, false, false),
        ("Emb+Dur", true, true, false, false),
        ("Emb+EH", true, false, true, false),
        ("Emb+Dur+EH", true, true, true, false),
        ("Emb+PH", true, false, false, true),
    ];
    for (label, emb, dur, eh, ph) in features {
        let mut spec = plain.clone();
        let f = &mut spec.model.features;
        f.use_embeddings = emb;
        f.use_duration = dur;
        f.use_entry_hints = eh;
        f.use_pitch_hints = ph;
        spec.name = format!("{} {label}", base.method.title());
        rows.push(AblationRow {
            group: AblationGroup::Features,
            label: label.to_string(),
            spec,
        });
    }
    for enc in TimeEncoding::ALL {
        let mut spec = base.clone();
        spec.model.features.time_encoding = enc;
        spec.name = format!("{} {enc}", base.method.title());
        rows.push(AblationRow {
            group: AblationGroup::TimeEncoding,
            label: enc.to_string(),
            spec,
        });
    }
    for aug in Augmentation::ALL {
        let mut spec = base.clone();
        spec.model.features.augment = aug;
        spec.name = format!("{} augment={aug}", base.method.title());
        rows.push(AblationRow {
            group: AblationGroup::Augmentation,
            label: aug.to_string(),
            spec,
        });
    }
    rows
}

/// Runs the given ablation rows (each distinct spec once) and returns one
/// table per group, rows labeled by their setting.
pub fn run_ablation_rows(rows: &[AblationRow], policy: CheckpointPolicy) -> Result<Vec<ResultTable>> {
    let mut done: HashMap<String, ExperimentResult> = HashMap::new();
    let mut tables: Vec<(AblationGroup, Vec<ExperimentResult>)> = Vec::new();
    for row in rows {
        let hash = row.spec.hash()?;
        let result = match done.get(&hash) {
            Some(r) => r.clone(),
            None => {
                let r = run_experiment(&row.spec, policy)?;
                done.insert(hash, r.clone());
                r
            }
        };
        let labeled = ExperimentResult {
            name: row.label.clone(),
            ..result
        };
        match tables.iter_mut().find(|(g, _)| *g == row.group) {
            Some((_, v)) => v.push(labeled),
            None => tables.push((row.group, vec![labeled])),
        }
    }
    Ok(tables.into_iter().map(|(g, v)| results_table(g.title(), &v)).collect())
}

pub fn run_ablations(base: &ExperimentSpec, policy: CheckpointPolicy) -> Result<Vec<ResultTable>> {
    run_ablation_rows(&ablation_specs(base), policy)
}

/// Loads a neural model of one repetition, for callers that need the model
/// itself (live sessions, stream checks).
pub fn load_neural(spec: &ExperimentSpec, repetition: usize) -> Result<Model<f32>> {
    match Separator::load(&checkpoint_path(spec, repetition)?)?.0 {
        Separator::Neural(m) => Ok(*m),
        other => Err(Error::ModelMismatch(format!("{} is not a neural model", other.name()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CorpusConfig, DatasetManifest, GenreProfile, ManifestEntry};
    use crate::neural::Arch;
    use crate::types::{Note, Song, Track};

    /// Two parts in disjoint registers, eight songs per split.
    fn toy_dataset(dir: &std::path::Path) -> PathBuf {
        let songs: Vec<Song> = (0..24)
            .map(|s| {
                let tracks = (0..2)
                    .map(|k| {
                        let notes = (0..12u32)
                            .map(|i| Note { time: i * 12, pitch: 40 + 24 * k as u8 + ((i + s) % 7) as u8, duration: 12 })
                            .collect();
                        Track::new(k, format!("p{k}"), notes)
                    })
                    .collect();
                Song::new(format!("song{s:02}"), 24, tracks)
            })
            .collect();
        let entries = songs
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestEntry {
                source_id: s.source_id.clone(),
                split: [Split::Train, Split::Valid, Split::Test][i % 3],
                note_count: s.note_count(),
                parts: 2,
            })
            .collect();
        let manifest = DatasetManifest { entries };
        let ds = Dataset::from_songs(&songs, &manifest, &CorpusConfig::new(GenreProfile::Generic)).unwrap();
        let path = dir.join("toy.dataset");
        ds.save(&path).unwrap();
        path
    }

    fn tiny(spec: &mut ExperimentSpec) {
        spec.model.hidden = 8;
        spec.model.layers = 1;
        spec.model.heads = 2;
        spec.model.ffn = 8;
        spec.train.max_epochs = 2;
        spec.train.batch_size = 4;
        spec.mlp.hidden = 8;
        spec.mlp.layers = 1;
        spec.mlp_train.max_epochs = 2;
    }

    #[test]
    fn zones_are_perfect_on_disjoint_registers() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path());
        let spec = ExperimentSpec::new(Method::Zones, &data, dir.path());
        let r = run_experiment(&spec, CheckpointPolicy::Require).unwrap();
        assert_eq!(r.mean().test, 1.0);
    }

    #[test]
    fn missing_checkpoint_is_an_error_when_required() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path());
        let mut spec = ExperimentSpec::new(Method::Neural(Arch::Lstm), &data, dir.path());
        tiny(&mut spec);
        assert!(matches!(run_experiment(&spec, CheckpointPolicy::Require), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn reruns_are_identical_and_reuse_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path());
        let mut results = Vec::new();
        for method in [Method::Neural(Arch::Lstm), Method::Mlp, Method::MlpOracle, Method::ClosestPitch] {
            let mut spec = ExperimentSpec::new(method, &data, dir.path().join("out"));
            tiny(&mut spec);
            spec.repetitions = 2;
            let first = run_experiment(&spec, CheckpointPolicy::TrainIfMissing).unwrap();
            let again = run_experiment(&spec, CheckpointPolicy::Require).unwrap();
            assert_eq!(first, again);
            if method.is_trained() {
                assert!(checkpoint_path(&spec, 1).unwrap().exists());
            }
            results.push(first);
        }
        let t1 = comparison_table(&results);
        let t2 = comparison_table(&results);
        assert_eq!(t1.to_text(), t2.to_text());
        assert_eq!(t1.rows[0][0], "MLP");
        assert_eq!(t1.rows.last().unwrap()[0], "Closest-pitch");
    }

    #[test]
    fn ablation_matrix_shape() {
        let base = ExperimentSpec::new(Method::Neural(Arch::Lstm), "d", "o");
        let rows = ablation_specs(&base);
        assert_eq!(rows.len(), 6 + 4 + 3);
        let base_like: Vec<_> = rows.iter().filter(|r| r.spec.model == base.model).map(|r| r.label.as_str()).collect();
        assert_eq!(base_like, ["Emb", "beat_position_embedding", "strong"]);
    }

    #[test]
    fn ablations_share_duplicate_rows() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_dataset(dir.path());
        let mut base = ExperimentSpec::new(Method::Neural(Arch::Lstm), &data, dir.path());
        tiny(&mut base);
        base.train.max_epochs = 1;
        let rows: Vec<_> = ablation_specs(&base)
            .into_iter()
            .filter(|r| r.group == AblationGroup::Augmentation)
            .collect();
        let tables = run_ablation_rows(&rows, CheckpointPolicy::TrainIfMissing).unwrap();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].rows.len(), 3);
        let ckpts = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt")).count();
        assert_eq!(ckpts, 3);
    }
}
