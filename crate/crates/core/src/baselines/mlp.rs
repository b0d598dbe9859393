//! Feed-forward note classifier on hand-crafted context features.
//!
//! Each note is classified on its own from a feature vector describing the
//! note, its neighbors and the running state of every part. The running state
//! and the labels of preceding neighbors come from the model's own earlier
//! predictions, or from the ground truth in oracle mode.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{parse_pairs, Hints};
use crate::neural::{choose_part, softmax_cross_entropy, Adam, AdamConfig, Grads, Linear, ParamStore};
use crate::types::{Mixture, Prediction, Tally, MAX_PITCH};

pub const MLP_KIND: &str = "mlp";
const PITCHES: usize = MAX_PITCH as usize + 1;
const DURATION_CLIP: f32 = 192.0;
/// Time offsets to context notes are clipped to this many beats.
const TIME_OFFSET_BEATS: f32 = 8.0;
const CHORD_SCALE: f32 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpConfig {
    pub num_parts: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Neighbors on each side; 0 also drops the per-part history features.
    pub context: usize,
    pub entry_hints: bool,
    pub resolution: u32,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            num_parts: 4,
            hidden: 128,
            layers: 3,
            context: 2,
            entry_hints: true,
            resolution: 24,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl MlpConfig {
    pub fn new(num_parts: usize) -> Self {
        Self {
            num_parts,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_parts < 2 || self.hidden == 0 || self.layers == 0 || self.resolution == 0 {
            return Err(Error::Config("MLP needs two or more parts and positive sizes".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_parts", self.num_parts.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("context", self.context.to_string()),
            ("entry_hints", self.entry_hints.to_string()),
            ("resolution", self.resolution.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_parts" => self.num_parts = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "context" => self.context = parse_value(key, value)?,
            "entry_hints" => self.entry_hints = parse_value(key, value)?,
            "resolution" => self.resolution = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_pairs(text)? {
            if !c.set(&k, &v)? {
                return Err(Error::Config(format!("unknown MLP key {k:?}")));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn input_width(&self) -> usize {
        let k = self.num_parts;
        let note = PITCHES + 4;
        let neighbors = if self.context == 0 { 0 } else { 2 * self.context * 4 + self.context * k };
        let parts = if self.context == 0 { 0 } else { 3 * k };
        note + neighbors + parts + if self.entry_hints { k } else { 0 }
    }
}

/// Per-part running state: last pitch and release time of assigned notes.
#[derive(Clone, Debug)]
struct History {
    last_pitch: Vec<Option<u8>>,
    release: Vec<u32>,
}

impl History {
    fn new(k: usize) -> Self {
        Self {
            last_pitch: vec![None; k],
            release: vec![0; k],
        }
    }

    fn assign(&mut self, part: usize, time: u32, pitch: u8, duration: u32) {
        self.last_pitch[part] = Some(pitch);
        self.release[part] = self.release[part].max(time + duration);
    }
}

/// Feature row for note `i`, given labels of all earlier notes.
fn features(config: &MlpConfig, m: &Mixture, i: usize, earlier: &[usize], history: &History, hints: Option<&Array2<f32>>) -> Array1<f32> {
    let k = config.num_parts;
    let res = config.resolution as f32;
    let note = m.notes[i];
    let mut row = Vec::with_capacity(config.input_width());
    let mut onehot = vec![0f32; PITCHES];
    onehot[note.pitch as usize] = 1.0;
    row.extend(onehot);
    row.push(note.duration.min(DURATION_CLIP as u32) as f32 / DURATION_CLIP);
    row.push((note.time % config.resolution) as f32 / res);
    let chord_start = m.notes[..i].iter().rposition(|n| n.time != note.time).map_or(0, |p| p + 1);
    let chord_end = m.notes[i..].iter().position(|n| n.time != note.time).map_or(m.len(), |p| i + p);
    row.push((chord_end - chord_start) as f32 / CHORD_SCALE);
    row.push((i - chord_start) as f32 / CHORD_SCALE);
    if config.context > 0 {
        let c = config.context as isize;
        for off in (-c..0).chain(1..=c) {
            let j = i as isize + off;
            let present = j >= 0 && (j as usize) < m.len();
            if present {
                let other = m.notes[j as usize];
                let dp = f32::from(other.pitch) - f32::from(note.pitch);
                let dt = (other.time as f32 - note.time as f32) / res;
                row.extend([1.0, dp / 127.0, dp.abs() / 127.0, dt.clamp(-TIME_OFFSET_BEATS, TIME_OFFSET_BEATS) / TIME_OFFSET_BEATS]);
            } else {
                row.extend([0.0; 4]);
            }
            if off < 0 {
                let mut labels = vec![0f32; k];
                if present {
                    labels[earlier[j as usize]] = 1.0;
                }
                row.extend(labels);
            }
        }
        for part in 0..k {
            match history.last_pitch[part] {
                Some(p) => {
                    row.push((f32::from(note.pitch) - f32::from(p)).abs() / 127.0);
                    row.push(1.0);
                }
                None => row.extend([1.0, 0.0]),
            }
            row.push(if history.release[part] > note.time { 1.0 } else { 0.0 });
        }
    }
    if config.entry_hints {
        match hints {
            Some(h) => row.extend(h.row(i).iter().copied()),
            None => row.extend(std::iter::repeat_n(0.0, k)),
        }
    }
    debug_assert_eq!(row.len(), config.input_width());
    Array1::from(row)
}

/// Feature matrix built with ground-truth history (teacher forcing).
fn truth_features(config: &MlpConfig, m: &Mixture, hints: Option<&Array2<f32>>) -> Array2<f32> {
    let mut history = History::new(config.num_parts);
    let mut out = Array2::zeros((m.len(), config.input_width()));
    for i in 0..m.len() {
        out.row_mut(i).assign(&features(config, m, i, &m.labels, &history, hints));
        let n = m.notes[i];
        history.assign(m.labels[i], n.time, n.pitch, n.duration);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: ParamStore<f32>,
    layers: Vec<Linear>,
    head: Linear,
}

struct MlpCache {
    inputs: Vec<Array2<f32>>,
    head_in: Array2<f32>,
}

impl Mlp {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut width = config.input_width();
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            layers.push(Linear::new(&mut params, &format!("fc{i}"), width, config.hidden, &mut rng));
            width = config.hidden;
        }
        let head = Linear::new(&mut params, "head", width, config.num_parts, &mut rng);
        Ok(Self {
            config,
            params,
            layers,
            head,
        })
    }

    fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let next = layer.forward(&self.params, &h.view()).mapv(|v| v.max(0.0));
            inputs.push(h);
            h = next;
        }
        let logits = self.head.forward(&self.params, &h.view());
        (logits, MlpCache { inputs, head_in: h })
    }

    fn backward(&self, cache: &MlpCache, dlogits: &Array2<f32>, g: &mut Grads<f32>) {
        let mut d = self.head.backward(&self.params, &cache.head_in.view(), &dlogits.view(), g);
        let mut out = cache.head_in.clone();
        for (layer, input) in self.layers.iter().zip(&cache.inputs).rev() {
            d.zip_mut_with(&out, |dv, &o| {
                if o <= 0.0 {
                    *dv = 0.0;
                }
            });
            d = layer.backward(&self.params, &input.view(), &d.view(), g);
            out = input.clone();
        }
    }

    /// Labels notes in order, feeding back either the model's own labels or,
    /// with `oracle_history`, the ground truth.
    pub fn predict(&self, m: &Mixture, hints: &Hints, oracle_history: bool) -> Result<Prediction> {
        if m.num_parts != self.config.num_parts {
            return Err(Error::ModelMismatch(format!(
                "mixture has {} parts, model has {}",
                m.num_parts, self.config.num_parts
            )));
        }
        let entry = if self.config.entry_hints {
            let e = hints.entry.as_ref().ok_or(Error::MissingHints("entry hints"))?;
            if e.nrows() != m.len() {
                return Err(Error::LengthMismatch {
                    what: "entry hint rows",
                    left: e.nrows(),
                    right: m.len(),
                });
            }
            Some(e)
        } else {
            None
        };
        let k = self.config.num_parts;
        let mut history = History::new(k);
        let mut labels = Vec::with_capacity(m.len());
        let mut scores = Array2::zeros((m.len(), k));
        for i in 0..m.len() {
            let earlier: &[usize] = if oracle_history { &m.labels } else { &labels };
            let x = features(&self.config, m, i, earlier, &history, entry).insert_axis(Axis(0));
            let (logits, _) = self.forward(&x);
            let label = choose_part(logits.row(0), entry.map(|e| e.row(i)));
            scores.row_mut(i).assign(&logits.row(0));
            labels.push(label);
            let fed = if oracle_history { m.labels[i] } else { label };
            let n = m.notes[i];
            history.assign(fed, n.time, n.pitch, n.duration);
        }
        Ok(Prediction {
            labels,
            scores: Some(scores),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(MLP_KIND);
        ck.meta = self.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        ck.tensors = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != MLP_KIND {
            return Err(Error::Checkpoint(format!("expected an {MLP_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let mut config = MlpConfig::default();
        for (k, v) in &ck.meta {
            config.set(k, v)?;
        }
        let mut mlp = Mlp::new(config, 0)?;
        if ck.tensors.len() != mlp.params.len() {
            return Err(Error::Checkpoint("tensor count does not match the MLP layout".into()));
        }
        for (name, t) in &ck.tensors {
            let id = mlp
                .params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if mlp.params.get(id).dim() != t.dim() {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
            }
            mlp.params.get_mut(id).assign(t);
        }
        Ok(mlp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpTrainConfig {
    /// Notes per optimizer step.
    pub batch_notes: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            batch_notes: 256,
            max_epochs: 30,
            patience: 5,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl MlpTrainConfig {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_notes", self.batch_notes.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_notes" => self.batch_notes = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "lr" => self.adam.lr = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn hints_for(config: &MlpConfig, m: &Mixture) -> Hints {
    if config.entry_hints {
        Hints::from_mixture(m)
    } else {
        Hints::none()
    }
}

/// Accuracy over mixtures with ground-truth entry hints.
pub fn evaluate_mlp(mlp: &Mlp, mixtures: &[&Mixture], oracle_history: bool) -> Result<Tally> {
    let mut tally = Tally::default();
    for m in mixtures {
        let p = mlp.predict(m, &hints_for(&mlp.config, m), oracle_history)?;
        tally.add(&p.labels, &m.labels);
    }
    Ok(tally)
}

/// Teacher-forced training; keeps the weights with the best validation
/// accuracy in plain (self-fed) mode.
pub fn train_mlp(config: MlpConfig, train_set: &[&Mixture], valid_set: &[&Mixture], tc: &MlpTrainConfig) -> Result<Mlp> {
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut mlp = Mlp::new(config, tc.seed)?;
    let rows: Vec<Array2<f32>> = train_set
        .iter()
        .map(|m| truth_features(&config, m, hints_for(&config, m).entry.as_ref()))
        .collect();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Config(e.to_string()))?;
    let y: Vec<usize> = train_set.iter().flat_map(|m| m.labels.iter().copied()).collect();
    let mut adam = Adam::new(tc.adam, &mlp.params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut best = (f64::NEG_INFINITY, mlp.params.clone());
    let mut since_best = 0;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(tc.batch_notes.max(1)).enumerate() {
            let xb = x.select(Axis(0), chunk);
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(y[i])).collect();
            let (logits, cache) = mlp.forward(&xb);
            let ce = softmax_cross_entropy(&logits.view(), &targets);
            if !ce.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::from(ce.loss),
                });
            }
            let mut g = mlp.params.zero_grads();
            mlp.backward(&cache, &ce.dlogits, &mut g);
            adam.step(&mut mlp.params, &g);
        }
        let check = if valid_set.is_empty() { train_set } else { valid_set };
        let acc = evaluate_mlp(&mlp, check, false)?.accuracy();
        log::info!("mlp epoch {epoch}: valid {acc:.4}");
        if acc > best.0 {
            best = (acc, mlp.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    mlp.params = best.1;
    Ok(mlp)
}
