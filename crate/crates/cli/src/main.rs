use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partsep::harness::{CheckpointPolicy, SessionConfig};
use partsep::ingest::{CorpusConfig, GenreProfile};
use partsep::neural::gradcheck_all;
use partsep_cli::gateway::{serve, Gateway};
use partsep_cli::{
    ablate, build_ingest, build_spec, experiment, ingest, load_live_model, load_separator, parse_assignments, render,
    separate_file, SeparateOptions,
};

#[derive(Parser)]
#[command(name = "partsep", version, about = "Assign the notes of a MIDI mixture to instrument parts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Settings {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, e.g. `--set train.max_epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    settings: Settings,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, quantize and split a directory of MIDI files.
    Ingest {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        profile: Option<String>,
    },
    /// Train (or load) a model and report train/valid/test accuracy.
    Train(ExperimentArgs),
    /// Evaluate an existing checkpoint; fails if it was never trained.
    Eval(ExperimentArgs),
    /// Feature, time encoding and augmentation ablations around a base model.
    Ablate(ExperimentArgs),
    /// Split one MIDI file into parts.
    Separate {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Trained checkpoint.
        #[arg(long, conflicts_with = "method")]
        model: Option<PathBuf>,
        /// Rule-based method fit on `--dataset` instead of a checkpoint.
        #[arg(long, requires = "dataset")]
        method: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write a piano roll PNG.
        #[arg(long)]
        roll: Option<PathBuf>,
        #[arg(long, default_value = "generic")]
        profile: String,
    },
    /// Serve a causal model over websockets.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: SocketAddr,
        #[arg(long, default_value_t = SessionConfig::default().ms_per_step)]
        ms_per_step: f64,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn flags(settings: &Settings, named: &[(&str, Option<String>)]) -> partsep::Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = named
        .iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v)))
        .collect();
    out.extend(parse_assignments(&settings.sets)?);
    Ok(out)
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn experiment_spec(a: &ExperimentArgs) -> partsep::Result<partsep::harness::ExperimentSpec> {
    let named = [
        ("method", a.method.clone()),
        ("dataset", path(&a.dataset)),
        ("output_dir", path(&a.output_dir)),
    ];
    build_spec(a.settings.config.as_deref(), &flags(&a.settings, &named)?)
}

fn run(cli: Cli) -> partsep::Result<()> {
    match cli.command {
        Command::Ingest {
            settings,
            input,
            output,
            manifest,
            profile,
        } => {
            let named = [
                ("input", path(&input)),
                ("output", path(&output)),
                ("manifest", path(&manifest)),
                ("profile", profile),
            ];
            let opts = build_ingest(settings.config.as_deref(), &flags(&settings, &named)?)?;
            print!("{}", ingest(&opts)?);
        }
        Command::Train(a) => print!("{}", experiment(&experiment_spec(&a)?, CheckpointPolicy::TrainIfMissing)?.to_text()),
        Command::Eval(a) => print!("{}", experiment(&experiment_spec(&a)?, CheckpointPolicy::Require)?.to_text()),
        Command::Ablate(a) => print!("{}", render(&ablate(&experiment_spec(&a)?)?)),
        Command::Separate {
            input,
            output,
            model,
            method,
            dataset,
            roll,
            profile,
        } => {
            let (sep, names) = load_separator(model.as_deref(), method.as_deref(), dataset.as_deref())?;
            let profile: GenreProfile = profile.parse()?;
            let opts = SeparateOptions {
                input: &input,
                output: &output,
                roll: roll.as_deref(),
                corpus: CorpusConfig::new(profile),
            };
            print!("{}", separate_file(&sep, &names, &opts)?);
        }
        Command::Serve { model, addr, ms_per_step } => {
            let config = SessionConfig {
                ms_per_step,
                ..SessionConfig::default()
            };
            let gateway = Gateway::new(load_live_model(&model)?, config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(gateway, addr))?;
        }
        Command::Gradcheck { seed } => {
            let reports = gradcheck_all(seed)?;
            let mut worst = 0.0f64;
            for r in &reports {
                println!("{r}");
                worst = worst.max(r.max_rel_error);
            }
            println!("worst {worst:.2e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
