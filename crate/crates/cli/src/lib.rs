//! Command implementations behind the `partsep` binary, and the live
//! websocket gateway.

pub mod gateway;

use std::fs;
use std::path::{Path, PathBuf};

use partsep::features::parse_pairs;
use partsep::harness::{
    comparison_table, piano_roll_png, run_ablations, run_experiment, separate, CheckpointPolicy,
    ExperimentSpec, Method, ResultTable, Separator,
};
use partsep::ingest::{build_dataset, load_corpus, CorpusConfig, Dataset, Split};
use partsep::{Error, Result};

/// Settings in increasing priority: a config file, then command-line pairs.
pub fn merged_pairs(config: Option<&Path>, flags: &[(String, String)]) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = match config {
        Some(path) => parse_pairs(&fs::read_to_string(path)?)?.into_iter().collect(),
        None => Vec::new(),
    };
    pairs.extend(flags.iter().cloned());
    Ok(pairs)
}

/// Splits `key=value` arguments.
pub fn parse_assignments(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got {a:?}")))
        })
        .collect()
}

/// Builds an experiment from method defaults, a config file and flags.
pub fn build_spec(config: Option<&Path>, flags: &[(String, String)]) -> Result<ExperimentSpec> {
    let pairs = merged_pairs(config, flags)?;
    let method: Method = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "method")
        .ok_or_else(|| Error::Config("no method given (flag --method or key method=)".into()))?
        .1
        .parse()?;
    let mut spec = ExperimentSpec::new(method, "", "runs");
    for (k, v) in &pairs {
        spec.set(k, v)?;
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub input: PathBuf,
    pub output: PathBuf,
    pub manifest: Option<PathBuf>,
    pub corpus: CorpusConfig,
}

pub fn build_ingest(config: Option<&Path>, flags: &[(String, String)]) -> Result<IngestOptions> {
    let mut input = None;
    let mut output = None;
    let mut manifest = None;
    let mut corpus = CorpusConfig::default();
    let bad = |k: &str, v: &str| Error::Config(format!("bad value {v:?} for {k}"));
    for (k, v) in merged_pairs(config, flags)? {
        match k.as_str() {
            "input" => input = Some(PathBuf::from(&v)),
            "output" => output = Some(PathBuf::from(&v)),
            "manifest" => manifest = Some(PathBuf::from(&v)),
            "profile" => corpus.profile = v.parse()?,
            "resolution" => corpus.resolution = v.parse().map_err(|_| bad(&k, &v))?,
            "split_seed" => corpus.split_seed = v.parse().map_err(|_| bad(&k, &v))?,
            "family_map" => corpus.family_map_path = Some(PathBuf::from(&v)),
            _ => return Err(Error::Config(format!("unknown ingest key {k:?}"))),
        }
    }
    corpus.validate()?;
    Ok(IngestOptions {
        input: input.ok_or_else(|| Error::Config("ingest needs input=".into()))?,
        output: output.ok_or_else(|| Error::Config("ingest needs output=".into()))?,
        manifest,
        corpus,
    })
}

/// Loads a MIDI directory, writes the dataset and returns a summary.
pub fn ingest(opts: &IngestOptions) -> Result<String> {
    let corpus = load_corpus(&opts.input, &opts.corpus)?;
    let (dataset, manifest) = build_dataset(&corpus, &opts.corpus)?;
    dataset.save(&opts.output)?;
    if let Some(path) = &opts.manifest {
        manifest.write(fs::File::create(path)?)?;
    }
    let mut out = format!(
        "files {}\ndiscarded {}\nparts {}\nnotes {}\n",
        dataset.entries.len(),
        corpus.discarded.len(),
        dataset.part_names.join("|"),
        dataset.note_count()
    );
    for split in Split::ALL {
        let t = manifest.totals(split);
        out.push_str(&format!("{split} {} files {} notes\n", t.files, t.notes));
    }
    Ok(out)
}

/// Writes a table as `<stem>.txt` and `<stem>.csv` in `dir`.
pub fn write_table(table: &ResultTable, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.txt")), table.to_text())?;
    fs::write(dir.join(format!("{stem}.csv")), table.to_csv()?)?;
    Ok(())
}

/// `train` and `eval`: run one experiment and emit its table.
pub fn experiment(spec: &ExperimentSpec, policy: CheckpointPolicy) -> Result<ResultTable> {
    let result = run_experiment(spec, policy)?;
    let table = comparison_table(std::slice::from_ref(&result));
    write_table(&table, &spec.output_dir, &format!("{}-{}", spec.method, result.hash))?;
    Ok(table)
}

pub fn ablate(base: &ExperimentSpec) -> Result<Vec<ResultTable>> {
    let tables = run_ablations(base, CheckpointPolicy::TrainIfMissing)?;
    let hash = base.hash()?;
    for (i, t) in tables.iter().enumerate() {
        write_table(t, &base.output_dir, &format!("ablation-{hash}-{i}"))?;
    }
    Ok(tables)
}

/// A separator from a checkpoint file, or a rule-based method fit on a
/// dataset (`zones`, `zones_oracle`, `closest_pitch`, `closest_pitch_mono`).
pub fn load_separator(model: Option<&Path>, method: Option<&str>, dataset: Option<&Path>) -> Result<(Separator, Vec<String>)> {
    if let Some(path) = model {
        return Separator::load(path);
    }
    let method: Method = method
        .ok_or_else(|| Error::Config("give a model checkpoint or a rule-based method".into()))?
        .parse()?;
    let dataset = Dataset::load(dataset.ok_or_else(|| Error::Config("rule-based methods need a dataset".into()))?)?;
    let k = dataset.num_parts();
    let sep = match method {
        Method::Zones => Separator::fit_zones(&dataset.mixtures(Split::Train))?,
        Method::ZonesOracle => Separator::ZonesOracle { num_parts: k },
        Method::ClosestPitch => Separator::ClosestPitch { num_parts: k, mono: false },
        Method::ClosestPitchMono => Separator::ClosestPitch { num_parts: k, mono: true },
        other => return Err(Error::Config(format!("{other} needs a trained checkpoint"))),
    };
    Ok((sep, dataset.part_names))
}

pub struct SeparateOptions<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub roll: Option<&'a Path>,
    pub corpus: CorpusConfig,
}

pub fn separate_file(sep: &Separator, names: &[String], opts: &SeparateOptions) -> Result<String> {
    let bytes = fs::read(opts.input)?;
    let result = separate(&bytes, sep, names, None, &opts.corpus)?;
    fs::write(opts.output, &result.midi)?;
    if let Some(path) = opts.roll {
        fs::write(path, piano_roll_png(&result.input, &result.prediction.labels)?)?;
    }
    Ok(result.report())
}

/// A neural separator for the live gateway.
pub fn load_live_model(path: &Path) -> Result<partsep::neural::Model<f32>> {
    match Separator::load(path)?.0 {
        Separator::Neural(model) => Ok(*model),
        other => Err(Error::Config(format!("{} cannot run live; serve needs a neural checkpoint", other.name()))),
    }
}

/// Tables one after another.
pub fn render(tables: &[ResultTable]) -> String {
    tables.iter().map(ResultTable::to_text).collect::<Vec<_>>().join("\n")
}
