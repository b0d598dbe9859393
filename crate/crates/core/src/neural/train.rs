//! Mini-batch training with early stopping on validation accuracy.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Model, ModelConfig, EVAL_WINDOW};
use super::params::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::features::{encode, parse_pairs, transpose_augment, FeatureConfig, Hints};
use crate::types::{Mixture, Tally};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_len: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optional cap on optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            seq_len: 500,
            eval_len: EVAL_WINDOW,
            adam: AdamConfig::default(),
            seed: 0,
            max_epochs: 100,
            patience: 10,
            steps_per_epoch: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size, sequence length and epochs must be positive".into()));
        }
        if self.eval_len < self.seq_len {
            return Err(Error::Config(format!(
                "evaluation length {} is shorter than training length {}",
                self.eval_len, self.seq_len
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("eval_len", self.eval_len.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            (
                "steps_per_epoch",
                self.steps_per_epoch.map_or_else(|| "all".to_string(), |s| s.to_string()),
            ),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seq_len" => self.seq_len = parse_value(key, value)?,
            "eval_len" => self.eval_len = parse_value(key, value)?,
            "lr" => self.adam.lr = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "steps_per_epoch" => {
                self.steps_per_epoch = match value.trim() {
                    "all" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (key, value) in parse_pairs(text)? {
            if !config.set(&key, &value)? {
                return Err(Error::Config(format!("unknown training key {key:?}")));
            }
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_acc: f64,
}

pub const LOG_HEADER: &str = "epoch\tsteps\ttrain_loss\ttrain_acc\tvalid_acc";

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.steps, self.train_loss, self.train_acc, self.valid_acc
        )
    }
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{}", e.to_line());
        }
        out
    }
}

/// Hints derived from the ground truth, if the features use any.
pub fn truth_hints(mixture: &Mixture, features: &FeatureConfig) -> Hints {
    if features.use_entry_hints || features.use_pitch_hints {
        Hints::from_mixture(mixture)
    } else {
        Hints::none()
    }
}

/// Note-level accuracy of a model over mixtures, with ground-truth hints.
pub fn evaluate(model: &Model<f32>, mixtures: &[&Mixture], window: usize) -> Result<Tally> {
    let mut tally = Tally::default();
    for m in mixtures {
        let hints = truth_hints(m, &model.config.features);
        let p = model.predict_windowed(m, &hints, model.config.arch.mode(), window)?;
        tally.add(&p.labels, &m.labels);
    }
    Ok(tally)
}

fn label_counts(m: &Mixture) -> Vec<usize> {
    let mut counts = vec![0; m.num_parts];
    for &l in &m.labels {
        counts[l] += 1;
    }
    counts
}

/// One randomly transposed, randomly cropped training example.
fn sample_example<R: Rng>(m: &Mixture, config: &ModelConfig, seq_len: usize, rng: &mut R) -> Result<(Mixture, Hints)> {
    let shift = config.features.augment.sample(rng);
    let shifted = transpose_augment(m, shift);
    if label_counts(&shifted) != label_counts(m) {
        return Err(Error::InvalidNote("augmentation changed the labels".into()));
    }
    let hints = truth_hints(&shifted, &config.features);
    if shifted.len() <= seq_len {
        return Ok((shifted, hints));
    }
    let start = rng.random_range(0..=shifted.len() - seq_len);
    Ok((shifted.window(start, seq_len), hints.window(start, seq_len)))
}

/// Trains from scratch and returns the parameters with the best validation
/// accuracy. `on_epoch` sees every log row as it is produced.
pub fn train(
    config: ModelConfig,
    train_set: &[&Mixture],
    valid_set: &[&Mixture],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model<f32>, TrainReport)> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(m) = train_set.iter().chain(valid_set).find(|m| m.num_parts != config.num_parts) {
        return Err(Error::ModelMismatch(format!(
            "mixture has {} parts, model has {}",
            m.num_parts, config.num_parts
        )));
    }
    let mut model = Model::<f32>::new(config, tc.seed)?;
    let mut adam = Adam::new(tc.adam, &model.params);
    let mut data_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x6461_7461);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x6472_6f70);
    let mut report = TrainReport::default();
    let mut best = model.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=tc.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut train_tally = Tally::default();
        let mut epoch_steps = 0;
        for chunk in order.chunks(tc.batch_size) {
            if tc.steps_per_epoch.is_some_and(|cap| epoch_steps >= cap) {
                break;
            }
            let examples = chunk
                .iter()
                .map(|&i| sample_example(train_set[i], &config, tc.seq_len, &mut data_rng))
                .collect::<Result<Vec<_>>>()?;
            let features = examples
                .iter()
                .map(|(m, h)| encode(m, h, &config.features))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<_> = features.iter().collect();
            let labels: Vec<&[usize]> = examples.iter().map(|(m, _)| m.labels.as_slice()).collect();
            let (ce, grads) = model.loss_and_grads(&batch, &labels, Some(&mut drop_rng))?;
            let loss = f64::from(ce.loss);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, step: steps, loss });
            }
            adam.step(&mut model.params, &grads);
            steps += 1;
            epoch_steps += 1;
            loss_sum += loss;
            train_tally += Tally {
                correct: ce.correct,
                total: ce.count,
            };
        }
        let valid_acc = if valid_set.is_empty() {
            train_tally.accuracy()
        } else {
            evaluate(&model, valid_set, tc.eval_len)?.accuracy()
        };
        let row = EpochLog {
            epoch,
            steps,
            train_loss: loss_sum / epoch_steps.max(1) as f64,
            train_acc: train_tally.accuracy(),
            valid_acc,
        };
        info!(
            "{} epoch {epoch}: loss {:.4} train {:.4} valid {:.4} ({:.1}s)",
            config.arch,
            row.train_loss,
            row.train_acc,
            row.valid_acc,
            started.elapsed().as_secs_f64()
        );
        on_epoch(&row);
        report.epochs.push(row);
        if valid_acc > best_acc {
            best_acc = valid_acc;
            best = model.params.clone();
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }
    model.params = best;
    report.best_valid_acc = best_acc;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Arch;
    use crate::types::Note;

    fn song(seed: u64, n: usize) -> Mixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tagged: Vec<(Note, usize)> = (0..n)
            .map(|i| {
                let label = i % 2;
                let note = Note {
                    time: (i / 2) as u32 * 6,
                    pitch: if label == 0 { 72 } else { 48 } + rng.random_range(0..8),
                    duration: 6,
                };
                (note, label)
            })
            .collect();
        tagged.sort();
        let (notes, labels) = tagged.into_iter().unzip();
        Mixture::new(notes, labels, 2).unwrap()
    }

    fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            ffn: 16,
            embed_dim: 4,
            ..ModelConfig::new(arch, 2)
        }
    }

    #[test]
    fn loss_drops_after_one_step_on_one_song() {
        let m = song(1, 40);
        let config = tiny(Arch::Lstm);
        let model = Model::<f32>::new(config, 0).unwrap();
        let ft = encode(&m, &Hints::none(), &config.features).unwrap();
        let loss = |model: &Model<f32>| {
            model
                .loss_and_grads::<ChaCha8Rng>(&[&ft], &[&m.labels], None)
                .unwrap()
        };
        let (before, grads) = loss(&model);
        let mut after_model = model.clone();
        let mut adam = Adam::new(AdamConfig::default(), &after_model.params);
        adam.step(&mut after_model.params, &grads);
        let (after, _) = loss(&after_model);
        assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
    }

    #[test]
    fn same_seed_same_log() {
        let songs: Vec<Mixture> = (0..6).map(|s| song(s, 30)).collect();
        let refs: Vec<&Mixture> = songs.iter().collect();
        let tc = TrainConfig {
            batch_size: 2,
            seq_len: 20,
            max_epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || train(tiny(Arch::TransformerDec), &refs[..4], &refs[4..], &tc, |_| {}).unwrap();
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        assert_eq!(ra.to_text().lines().next(), Some(LOG_HEADER));
    }

    #[test]
    fn separable_parts_are_learned() {
        let songs: Vec<Mixture> = (0..12).map(|s| song(s, 60)).collect();
        let refs: Vec<&Mixture> = songs.iter().collect();
        let tc = TrainConfig {
            batch_size: 4,
            seq_len: 60,
            max_epochs: 40,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let (model, report) = train(tiny(Arch::Lstm), &refs[..10], &refs[10..], &tc, |_| {}).unwrap();
        assert!(report.best_valid_acc > 0.95, "{}", report.to_text());
        assert!(evaluate(&model, &refs[10..], 2000).unwrap().accuracy() > 0.95);
    }

    #[test]
    fn config_rejects_short_eval() {
        let tc = TrainConfig {
            eval_len: 10,
            ..TrainConfig::default()
        };
        assert!(tc.validate().is_err());
        let text: String = TrainConfig::default()
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), TrainConfig::default());
    }

    #[test]
    fn runaway_training_reports_divergence() {
        let songs: Vec<Mixture> = (0..4).map(|s| song(s, 30)).collect();
        let refs: Vec<&Mixture> = songs.iter().collect();
        let tc = TrainConfig {
            batch_size: 2,
            seq_len: 30,
            max_epochs: 50,
            adam: AdamConfig {
                lr: 1e30,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let err = train(tiny(Arch::Lstm), &refs, &[], &tc, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn nan_learning_rate_is_rejected() {
        let tc = TrainConfig {
            adam: AdamConfig {
                lr: f64::NAN,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(tc.validate().is_err());
    }
}
