//! Experiment descriptions and their content hashes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baselines::{MlpConfig, MlpTrainConfig};
use crate::error::{Error, Result};
use crate::features::parse_pairs;
use crate::neural::{Arch, ModelConfig, TrainConfig};

/// A separation method: a baseline or one of the neural architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Zones,
    /// Zones fit to each evaluated sample itself.
    ZonesOracle,
    ClosestPitch,
    ClosestPitchMono,
    Mlp,
    /// MLP fed the true labels of earlier notes.
    MlpOracle,
    Neural(Arch),
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Zones,
        Method::ZonesOracle,
        Method::ClosestPitch,
        Method::ClosestPitchMono,
        Method::Mlp,
        Method::MlpOracle,
        Method::Neural(Arch::Lstm),
        Method::Neural(Arch::TransformerDec),
        Method::Neural(Arch::BiLstm),
        Method::Neural(Arch::TransformerEnc),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zones => "zones",
            Method::ZonesOracle => "zones_oracle",
            Method::ClosestPitch => "closest_pitch",
            Method::ClosestPitchMono => "closest_pitch_mono",
            Method::Mlp => "mlp",
            Method::MlpOracle => "mlp_oracle",
            Method::Neural(arch) => arch.as_str(),
        }
    }

    /// Human-readable row label.
    pub fn title(self) -> &'static str {
        match self {
            Method::Zones => "Zone-based",
            Method::ZonesOracle => "Zone-based (oracle)",
            Method::ClosestPitch => "Closest-pitch",
            Method::ClosestPitchMono => "Closest-pitch (mono)",
            Method::Mlp => "MLP",
            Method::MlpOracle => "MLP (oracle)",
            Method::Neural(Arch::Lstm) => "LSTM",
            Method::Neural(Arch::BiLstm) => "BiLSTM",
            Method::Neural(Arch::TransformerEnc) => "Transformer-Enc",
            Method::Neural(Arch::TransformerDec) => "Transformer-Dec",
        }
    }

    pub fn is_trained(self) -> bool {
        matches!(self, Method::Mlp | Method::MlpOracle | Method::Neural(_))
    }

    /// Position in the comparison table: online, oracle, offline, then the
    /// same groups with entry hints.
    pub fn table_rank(self, entry_hints: bool) -> (usize, usize) {
        let (group, slot) = match self {
            Method::Zones => (0, 0),
            Method::Mlp => (0, 1),
            Method::Neural(Arch::Lstm) => (0, 2),
            Method::Neural(Arch::TransformerDec) => (0, 3),
            Method::ZonesOracle => (1, 0),
            Method::MlpOracle => (1, 1),
            Method::Neural(Arch::BiLstm) => (2, 0),
            Method::Neural(Arch::TransformerEnc) => (2, 1),
            Method::ClosestPitch => (3, 0),
            Method::ClosestPitchMono => (3, 1),
        };
        let hinted = entry_hints && matches!(self, Method::Neural(_));
        match (hinted, group) {
            (true, 0) => (3, slot),
            (true, _) => (4, slot),
            _ => (group, slot),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// One row (or group of repeated rows) of a results table.
///
/// Keys in the text form are `name`, `dataset`, `method`, `repetitions`,
/// `output_dir`, and prefixed keys for the nested configs: `model.*`
/// (including feature keys), `train.*`, `mlp.*` and `mlp_train.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: PathBuf,
    pub method: Method,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mlp: MlpConfig,
    pub mlp_train: MlpTrainConfig,
    pub repetitions: usize,
    pub output_dir: PathBuf,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl ExperimentSpec {
    /// Defaults for `method`. Offline architectures get duration inputs.
    pub fn new(method: Method, dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        let mut model = ModelConfig::default();
        if let Method::Neural(arch) = method {
            model.arch = arch;
            model.features.use_duration = !arch.is_online();
        }
        Self {
            name: method.title().to_string(),
            dataset: dataset.into(),
            method,
            model,
            train: TrainConfig::default(),
            mlp: MlpConfig::default(),
            mlp_train: MlpTrainConfig::default(),
            repetitions: 1,
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        if let Method::Neural(arch) = self.method {
            if arch != self.model.arch {
                return Err(Error::Config(format!("method {arch} but model.arch={}", self.model.arch)));
            }
            self.model.validate()?;
            self.train.validate()?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = match key.split_once('.') {
            Some(("model", k)) => self.model.set(k, value)?,
            Some(("train", k)) => self.train.set(k, value)?,
            Some(("mlp", k)) => self.mlp.set(k, value)?,
            Some(("mlp_train", k)) => self.mlp_train.set(k, value)?,
            Some(_) => false,
            None => {
                match key {
                    "name" => self.name = value.trim().to_string(),
                    "dataset" => self.dataset = PathBuf::from(value.trim()),
                    "method" => {
                        self.method = value.parse()?;
                        if let Method::Neural(arch) = self.method {
                            self.model.arch = arch;
                        }
                    }
                    "repetitions" => self.repetitions = parse_value(key, value)?,
                    "output_dir" => self.output_dir = PathBuf::from(value.trim()),
                    _ => return Err(Error::Config(format!("unknown experiment key {key:?}"))),
                }
                true
            }
        };
        if known {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown experiment key {key:?}")))
        }
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let method: Method = pairs
            .get("method")
            .ok_or_else(|| Error::Config("experiment needs a method".into()))?
            .parse()?;
        let mut spec = Self::new(method, "", ".");
        spec.apply_text(text)?;
        spec.validate()?;
        Ok(spec)
    }

    fn substance_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = vec![("method".to_string(), self.method.to_string())];
        pairs.push(("repetitions".into(), self.repetitions.to_string()));
        pairs.extend(self.training_pairs());
        pairs
    }

    /// Settings that determine the trained parameters.
    fn training_pairs(&self) -> Vec<(String, String)> {
        let prefixed = |prefix: &str, kv: Vec<(&'static str, String)>| -> Vec<(String, String)> {
            kv.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)).collect()
        };
        match self.method {
            Method::Neural(_) => {
                let mut p = prefixed("model", self.model.to_pairs());
                p.extend(prefixed("train", self.train.to_pairs()));
                p
            }
            Method::Mlp | Method::MlpOracle => {
                let mut p = prefixed("mlp", self.mlp.to_pairs());
                p.extend(prefixed("mlp_train", self.mlp_train.to_pairs()));
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "name={}\ndataset={}\noutput_dir={}\n",
            self.name,
            self.dataset.display(),
            self.output_dir.display()
        );
        for (k, v) in self.substance_pairs() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Hash of everything that affects the results: the dataset contents
    /// and every setting except the row name and output location.
    pub fn hash(&self) -> Result<String> {
        let digest = file_digest(&self.dataset)?;
        Ok(short_hash(&digest, &self.substance_pairs()))
    }

    /// Checkpoint key: like [`ExperimentSpec::hash`] but ignoring the
    /// evaluation mode, so plain and oracle MLP rows share one model.
    pub fn training_key(&self) -> Result<String> {
        let digest = file_digest(&self.dataset)?;
        let family = match self.method {
            Method::MlpOracle => Method::Mlp,
            m => m,
        };
        let mut pairs = vec![("method".to_string(), family.to_string())];
        pairs.extend(self.training_pairs());
        Ok(short_hash(&digest, &pairs))
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn short_hash(digest: &str, pairs: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    h.update(digest.as_bytes());
    for (k, v) in pairs {
        h.update(format!("\n{k}={v}").as_bytes());
    }
    format!("{:x}", h.finalize())[..16].to_string()
}
