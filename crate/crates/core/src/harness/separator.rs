//! Any trained or rule-based method behind one prediction interface.

use std::path::Path;

use crate::baselines::{closest_pitch, fit_zones, oracle_zones, Mlp, Onsets, ZoneSearch, ZoneSet, MLP_KIND};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{parse_pairs, Hints};
use crate::neural::{Model, NEURAL_KIND};
use crate::types::{Mixture, Prediction};

const ZONES_KIND: &str = "zones";
const RULE_KIND: &str = "rule";

#[derive(Clone, Debug)]
pub enum Separator {
    Zones(ZoneSet),
    /// Refits zones to every sample's own labels.
    ZonesOracle { num_parts: usize },
    ClosestPitch { num_parts: usize, mono: bool },
    Mlp { model: Box<Mlp>, oracle: bool },
    Neural(Box<Model<f32>>),
}

impl Separator {
    pub fn num_parts(&self) -> usize {
        match self {
            Separator::Zones(z) => z.num_parts(),
            Separator::ZonesOracle { num_parts } | Separator::ClosestPitch { num_parts, .. } => *num_parts,
            Separator::Mlp { model, .. } => model.config.num_parts,
            Separator::Neural(m) => m.config.num_parts,
        }
    }

    /// Whether predictions read the mixture's own labels: oracle variants,
    /// and closest-pitch, which is told the true part of each part's first
    /// note.
    pub fn needs_truth(&self) -> bool {
        matches!(
            self,
            Separator::ZonesOracle { .. } | Separator::ClosestPitch { .. } | Separator::Mlp { oracle: true, .. }
        )
    }

    pub fn needs_entry_hints(&self) -> bool {
        match self {
            Separator::Mlp { model, .. } => model.config.entry_hints,
            Separator::Neural(m) => m.config.features.use_entry_hints,
            _ => false,
        }
    }

    pub fn needs_pitch_hints(&self) -> bool {
        matches!(self, Separator::Neural(m) if m.config.features.use_pitch_hints)
    }

    pub fn name(&self) -> String {
        match self {
            Separator::Zones(_) => "zones".into(),
            Separator::ZonesOracle { .. } => "zones_oracle".into(),
            Separator::ClosestPitch { mono: false, .. } => "closest_pitch".into(),
            Separator::ClosestPitch { mono: true, .. } => "closest_pitch_mono".into(),
            Separator::Mlp { oracle: false, .. } => "mlp".into(),
            Separator::Mlp { oracle: true, .. } => "mlp_oracle".into(),
            Separator::Neural(m) => m.config.arch.to_string(),
        }
    }

    /// Zones fit to a training set.
    pub fn fit_zones(train: &[&Mixture]) -> Result<Self> {
        Ok(Separator::Zones(fit_zones(train, ZoneSearch::default())?))
    }

    pub fn predict(&self, mixture: &Mixture, hints: &Hints) -> Result<Prediction> {
        let k = self.num_parts();
        if mixture.num_parts != k {
            return Err(Error::ModelMismatch(format!("mixture has {} parts, method has {k}", mixture.num_parts)));
        }
        if let Some(e) = &hints.entry {
            if e.ncols() != k {
                return Err(Error::ModelMismatch(format!("entry hints cover {} parts, method has {k}", e.ncols())));
            }
        }
        if let Some(p) = &hints.pitch {
            if p.len() != k {
                return Err(Error::ModelMismatch(format!("pitch hints cover {} parts, method has {k}", p.len())));
            }
        }
        match self {
            Separator::Zones(z) => Ok(z.predict(mixture)),
            Separator::ZonesOracle { .. } => Ok(oracle_zones(mixture, ZoneSearch::default())?.predict(mixture)),
            Separator::ClosestPitch { mono, .. } => closest_pitch(mixture, &Onsets::from_mixture(mixture), *mono),
            Separator::Mlp { model, oracle } => model.predict(mixture, hints, *oracle),
            Separator::Neural(m) => m.predict(mixture, hints, m.config.arch.mode()),
        }
    }

    pub fn to_checkpoint(&self, part_names: &[String]) -> Checkpoint {
        let mut ck = match self {
            Separator::Zones(z) => {
                let mut ck = Checkpoint::new(ZONES_KIND);
                for (k, v) in parse_pairs(&z.to_text()).expect("zone text parses") {
                    if k != "kind" {
                        ck.meta.push((k, v));
                    }
                }
                ck
            }
            Separator::ZonesOracle { num_parts } | Separator::ClosestPitch { num_parts, .. } => {
                Checkpoint::new(RULE_KIND)
                    .with_meta("method", self.name())
                    .with_meta("num_parts", num_parts.to_string())
            }
            Separator::Mlp { model, oracle } => model.to_checkpoint().with_meta("oracle", oracle.to_string()),
            Separator::Neural(m) => return m.to_checkpoint(part_names),
        };
        ck.meta.push(("part_names".into(), part_names.join("|")));
        ck
    }

    /// Restores a separator and its part names.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vec<String>)> {
        let names = |k: usize| -> Vec<String> {
            match ck.meta("part_names") {
                Some(v) if v.split('|').count() == k => v.split('|').map(str::to_string).collect(),
                _ => (1..=k).map(|i| format!("part {i}")).collect(),
            }
        };
        let sep = match ck.kind.as_str() {
            NEURAL_KIND => {
                let (m, n) = Model::from_checkpoint(ck)?;
                return Ok((Separator::Neural(Box::new(m)), n));
            }
            MLP_KIND => {
                let oracle = ck.meta("oracle") == Some("true");
                let meta: Vec<_> = ck
                    .meta
                    .iter()
                    .filter(|(k, _)| k != "oracle" && k != "part_names")
                    .cloned()
                    .collect();
                let stripped = Checkpoint {
                    meta,
                    ..ck.clone()
                };
                Separator::Mlp {
                    model: Box::new(Mlp::from_checkpoint(&stripped)?),
                    oracle,
                }
            }
            ZONES_KIND => {
                let text = format!(
                    "kind=zones\nboundaries={}\norder={}\n",
                    ck.meta("boundaries").unwrap_or(""),
                    ck.require("order")?
                );
                Separator::Zones(ZoneSet::from_text(&text)?)
            }
            RULE_KIND => {
                let num_parts: usize = ck
                    .require("num_parts")?
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad num_parts".into()))?;
                match ck.require("method")? {
                    "zones_oracle" => Separator::ZonesOracle { num_parts },
                    "closest_pitch" => Separator::ClosestPitch { num_parts, mono: false },
                    "closest_pitch_mono" => Separator::ClosestPitch { num_parts, mono: true },
                    other => return Err(Error::Checkpoint(format!("unknown rule {other:?}"))),
                }
            }
            other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
        };
        let k = sep.num_parts();
        Ok((sep, names(k)))
    }

    pub fn save(&self, path: &Path, part_names: &[String]) -> Result<()> {
        self.to_checkpoint(part_names).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
